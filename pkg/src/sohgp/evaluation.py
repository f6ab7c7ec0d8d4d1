"""Nested cross-validation of end-of-life classification across input scenarios and horizons."""

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.model_selection import StratifiedKFold

from .classifier import FAILED, HEALTHY, RawInputs, balanced_accuracy, confusion, train_classifier
from .config import ClassifierConfig
from .features import FEATURE_NAMES

HEALTH_INPUTS = ("r0", "dr0")
BENCHMARK_INPUTS = ("benchmark_r0",)
SCENARIOS = {
    "A": HEALTH_INPUTS,
    "B": BENCHMARK_INPUTS,
    "C": HEALTH_INPUTS + FEATURE_NAMES,
    "D": FEATURE_NAMES,
}


@dataclass
class ExampleTable:
    """Per-battery classifier inputs at each horizon.

    ``inputs[h][name]`` is an array aligned with ``battery_ids``; labels use
    1 for failed and 0 for healthy.
    """

    battery_ids: tuple
    labels: np.ndarray
    inputs: dict

    @property
    def horizons(self):
        return tuple(sorted(self.inputs))

    def matrix(self, horizon, names, rows=None):
        cols = [np.asarray(self.inputs[horizon][n], dtype=float) for n in names]
        X = np.column_stack(cols)
        return X if rows is None else X[rows]


def test_subsets(test_labels, fractions=(0.4, 0.6, 0.8), repeats=10, rng=None):
    """Index sets into a test fold: healthy fixed, failed sampled at each fraction, plus all."""
    rng = rng or np.random.default_rng(0)
    test_labels = np.asarray(test_labels)
    healthy = np.flatnonzero(test_labels == HEALTHY)
    failed = np.flatnonzero(test_labels == FAILED)
    subsets = []
    for frac in fractions:
        k = max(1, int(round(frac * failed.shape[0])))
        for _ in range(repeats):
            pick = np.sort(rng.choice(failed, size=k, replace=False))
            subsets.append((frac, np.concatenate([healthy, pick])))
    subsets.append((1.0, np.concatenate([healthy, failed])))
    return subsets


@dataclass
class EvalReport:
    cases: list
    summary: list
    relevance: list
    models: list = field(default_factory=list)

    @property
    def n_cases(self):
        return len(self.cases)

    def to_dict(self):
        return {"n_cases": self.n_cases, "cases": self.cases, "summary": self.summary,
                "relevance": self.relevance, "models": self.models}

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)

    def write_summary_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "horizon_days", "mean_balanced_accuracy", "std"])
            for r in self.summary:
                w.writerow([r["scenario"], r["horizon_days"], f"{r['mean']:.6f}", f"{r['std']:.6f}"])

    def write_relevance_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "input", "mean_inverse_length", "std_inverse_length"])
            for r in self.relevance:
                w.writerow([r["scenario"], r["input"], f"{r['mean']:.6f}", f"{r['std']:.6f}"])

    def accuracy(self, scenario, horizon):
        for r in self.summary:
            if r["scenario"] == scenario and r["horizon_days"] == horizon:
                return r["mean"]
        raise KeyError((scenario, horizon))


def relevance_analysis(models, names):
    """Mean and std of inverse length scales per input across training sets."""
    if len(models) < 2:
        raise ValueError("relevance needs at least two trained models")
    inv = np.array([m.inverse_lengths for m in models])
    return [{"input": n, "mean": float(inv[:, j].mean()), "std": float(inv[:, j].std())}
            for j, n in enumerate(names)]


def run_nested_cv(table, cfg=ClassifierConfig()):
    y = np.asarray(table.labels, dtype=int)
    n = y.shape[0]
    counts = np.bincount(y, minlength=2)
    if n < cfg.n_folds or counts.min() < cfg.n_folds:
        raise ValueError(f"need at least {cfg.n_folds} batteries per class, got {counts.tolist()}")
    horizons = table.horizons
    if cfg.train_horizons not in ("end", "all", "matched"):
        raise ValueError(f"unknown train_horizons {cfg.train_horizons!r}")
    skf = StratifiedKFold(n_splits=cfg.n_folds, shuffle=True, random_state=cfg.seed)
    cases, model_rows = [], []
    fold_models = {s: [] for s in cfg.scenarios}
    for fold, (train, test) in enumerate(skf.split(np.zeros(n), y)):
        subsets = test_subsets(y[test], cfg.failed_fractions, cfg.repeats,
                               np.random.default_rng([cfg.seed, fold]))
        ids = [table.battery_ids[i] for i in train]
        for scen in cfg.scenarios:
            names = SCENARIOS[scen]
            # (training horizons, tested horizons) per trained model
            if cfg.train_horizons == "matched":
                plan = [((h,), (h,)) for h in horizons]
            else:
                plan = [(horizons if cfg.train_horizons == "all" else (0,), horizons)]
            for train_h, test_h in plan:
                Xtr = np.vstack([table.matrix(h, names, train) for h in train_h])
                ytr = np.tile(y[train], len(train_h))
                model = train_classifier(RawInputs(Xtr), ytr, names, ids, cfg.restarts,
                                         seed=cfg.seed * 1000 + fold)
                if 0 in train_h:
                    fold_models[scen].append(model)
                model_rows.append({"scenario": scen, "fold": fold, "train_horizons": list(train_h),
                                   **model.to_dict()})
                for h in test_h:
                    pred = model.predict(RawInputs(table.matrix(h, names, test)))
                    for s_idx, (frac, rows) in enumerate(subsets):
                        tp, fn, tn, fp = confusion(y[test][rows], pred[rows])
                        cases.append({"scenario": scen, "fold": fold, "subset": s_idx,
                                      "failed_fraction": frac, "horizon_days": h, "tp": tp,
                                      "fn": fn, "tn": tn, "fp": fp,
                                      "balanced_accuracy": balanced_accuracy(tp, fn, tn, fp)})
    summary = summarise_cases(cases, cfg.scenarios, horizons)
    relevance = []
    for scen in cfg.scenarios:
        for r in relevance_analysis(fold_models[scen], SCENARIOS[scen]):
            relevance.append({"scenario": scen, **r})
    return EvalReport(cases, summary, relevance, model_rows)


def summarise_cases(cases, scenarios, horizons):
    """Average folds per test subset, then mean/std across subsets for each scenario and horizon."""
    out = []
    for scen in scenarios:
        for h in horizons:
            per_subset = {}
            for c in cases:
                if c["scenario"] == scen and c["horizon_days"] == h:
                    per_subset.setdefault(c["subset"], []).append(c["balanced_accuracy"])
            vals = np.array([np.mean(v) for _, v in sorted(per_subset.items())])
            out.append({"scenario": scen, "horizon_days": h, "mean": float(vals.mean()),
                        "std": float(vals.std()), "n_subsets": int(vals.shape[0])})
    return out
