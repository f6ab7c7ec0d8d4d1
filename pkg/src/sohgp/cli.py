"""Command-line pipeline: simulate | ingest | fit | calibrate | features | classify | report."""

import argparse
import csv
import hashlib
import json
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import synthfleet
from .config import ConfigError, config_from_dict, config_hash, load_config, to_jsonable
from .evaluation import ExampleTable, run_nested_cv
from .features import FEATURE_NAMES, feature_correlations, write_correlations_csv
from .pipeline import (PREPARED_FIELDS, PreparedBattery, calibration_point_raw, compute_moments,
                       fit_battery, load_physics, prepare_battery, stress_inputs)
from .population import (HealthTrajectory, OP_COLUMNS, PopulationGP, calibrate_trajectory,
                         days_to_model_time, fit_population, population_slices, write_slices_csv)
from .soc import NormalizationMoments, normalize
from .ssgp.benchmark import BenchmarkModel
from .ssgp.model import HealthModel
from .telemetry import ingest

STAGES = ("simulate", "ingest", "fit", "calibrate", "features", "classify", "report")
UPSTREAM = {"ingest": (), "fit": ("ingest",), "calibrate": ("fit",), "features": ("ingest",),
            "classify": ("calibrate", "features"), "report": ("calibrate", "features", "classify")}


class DependencyError(RuntimeError):
    pass


class StageRefused(RuntimeError):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def dump_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


class Workspace:
    def __init__(self, cfg):
        self.cfg = cfg
        self.input = Path(cfg.input_dir)
        self.work = Path(cfg.work_dir)
        self.output = Path(cfg.output_dir)

    def manifest_path(self, stage):
        if stage == "simulate":
            return self.input / "manifest.json"
        return self.work / "manifests" / f"{stage}.json"

    def telemetry_files(self):
        tdir = self.input / "telemetry"
        files = sorted(tdir.glob("*.csv")) if tdir.is_dir() else []
        if not files:
            files = sorted(p for p in self.input.glob("*.csv")
                           if p.name not in ("ground_truth.csv", "labels.csv"))
        return files


def stage_config(cfg, stage):
    sections = {
        "simulate": {"fleet": cfg.fleet, "seed": cfg.seed},
        "ingest": {"segments": cfg.segments, "soc": cfg.soc},
        "fit": {"fit": cfg.fit},
        "calibrate": {"population": cfg.population},
        "features": {"features": cfg.features, "horizons": cfg.population.horizons_days},
        "classify": {"classifier": cfg.classifier},
        "report": {"population": cfg.population},
    }
    return config_hash(sections[stage])


def upstream_hashes(ws, stage):
    out = {}
    for up in UPSTREAM[stage]:
        path = ws.manifest_path(up)
        if not path.exists():
            raise DependencyError(f"stage '{stage}' needs {path} (run '{up}' first)")
        out[up] = sha256_file(path)
    return out


def output_hashes(root, files):
    return {str(Path(f).relative_to(root)): sha256_file(f) for f in sorted(files)}


def up_to_date(ws, stage, cfg_hash, inputs):
    path = ws.manifest_path(stage)
    if not path.exists():
        return False
    m = read_json(path)
    if m.get("config_hash") != cfg_hash or m.get("inputs") != inputs:
        return False
    root = Path(m["root"])
    for rel, h in m.get("outputs", {}).items():
        f = root / rel
        if not f.exists() or sha256_file(f) != h:
            return False
    return True


def write_manifest(ws, stage, cfg_hash, inputs, root, files, counts):
    dump_json(ws.manifest_path(stage), {
        "stage": stage, "config_hash": cfg_hash, "seed": ws.cfg.seed, "inputs": inputs,
        "root": str(root), "outputs": output_hashes(root, files), "counts": counts})


# ---------------------------------------------------------------- stages

def cmd_simulate(ws, force=False, jobs=1):
    fleet = replace(ws.cfg.fleet, seed=ws.cfg.seed)
    fleet.validate()
    if ws.input.exists() and any(ws.input.iterdir()):
        if not force:
            raise StageRefused(f"{ws.input} already exists; pass --force to overwrite")
        shutil.rmtree(ws.input)
    params = synthfleet.generate_fleet(fleet, ws.input, segment_cfg=ws.cfg.segments, jobs=jobs)
    files = [*ws.telemetry_files(), ws.input / "ground_truth.csv", ws.input / "labels.csv",
             ws.input / "truth_surface.json"]
    n_failed = sum(p.label == "failed" for p in params)
    write_manifest(ws, "simulate", stage_config(ws.cfg, "simulate"), {}, ws.input, files,
                   {"batteries": len(params), "failed": n_failed, "healthy": len(params) - n_failed})
    return f"simulated {len(params)} batteries ({n_failed} failed) into {ws.input}"


def _prepared_frame(p):
    df = pd.DataFrame({k: getattr(p, k) for k in PREPARED_FIELDS})
    df.insert(0, "battery_id", p.battery_id)
    return df.rename(columns={"segment": "segment_id", "t": "timestamp_s", "current": "current_a",
                              "voltage": "voltage_v", "temperature": "temperature_c"})


def _read_prepared(path, entry):
    df = pd.read_csv(path, dtype={"battery_id": str})
    arrays = {"segment": df["segment_id"].to_numpy(int), "t": df["timestamp_s"].to_numpy(float),
              "current": df["current_a"].to_numpy(float), "voltage": df["voltage_v"].to_numpy(float),
              "temperature": df["temperature_c"].to_numpy(float),
              "concentration": df["concentration"].to_numpy(float),
              "conc_variance": df["conc_variance"].to_numpy(float),
              "noise_var": df["noise_var"].to_numpy(float)}
    return PreparedBattery(entry["battery_id"], entry["start"], entry["end"], stats=entry["stats"], **arrays)


def cmd_ingest(ws):
    files = ws.telemetry_files()
    if not files:
        raise DependencyError(f"no telemetry CSV files under {ws.input}")
    inputs = {str(f.relative_to(ws.input)): sha256_file(f) for f in files}
    cfg_hash = stage_config(ws.cfg, "ingest")
    if up_to_date(ws, "ingest", cfg_hash, inputs):
        return "ingest: up to date"
    ocv, gas = load_physics(ws.cfg)
    seg_dir = ws.work / "segments"
    if seg_dir.exists():
        shutil.rmtree(seg_dir)
    seg_dir.mkdir(parents=True)
    index, prepared, outputs = [], [], []
    totals = {"rows": 0, "dropped_out_of_range": 0, "duplicates": 0}
    for f in files:
        series_map, stats = ingest(f)
        for k in totals:
            totals[k] += getattr(stats, k)
        for bid in sorted(series_map):
            series = series_map[bid]
            prep = prepare_battery(series, ws.cfg, ocv, gas)
            out = seg_dir / f"{bid}.csv"
            _prepared_frame(prep).to_csv(out, index=False, float_format="%.12g")
            outputs.append(out)
            segs = []
            for sid in np.unique(prep.segment):
                rows = prep.segment == sid
                segs.append({"segment_id": int(sid), "start": int(prep.t[rows][0]),
                             "n_steps": int(rows.sum())})
            index.append({"battery_id": bid, "file": str(f.relative_to(ws.input)),
                          "start": int(series.start), "end": int(series.end),
                          "n_records": len(series), "segments": segs, "stats": prep.stats})
            prepared.append(prep)
    if not prepared or not any(len(p) for p in prepared):
        raise ValueError("no qualifying charging data in the fleet")
    index.sort(key=lambda e: e["battery_id"])
    moments = compute_moments([p for p in prepared if len(p)])
    dump_json(ws.work / "segment_index.json", {"batteries": index, "ingest": totals})
    dump_json(ws.work / "moments.json", moments.to_dict())
    outputs += [ws.work / "segment_index.json", ws.work / "moments.json"]
    write_manifest(ws, "ingest", cfg_hash, inputs, ws.work, outputs,
                   {"batteries": len(index), "steps": int(sum(len(p) for p in prepared)), **totals})
    return f"ingest: {len(index)} batteries, {sum(len(p) for p in prepared)} conditioned steps"


def _fit_one(args):
    seg_path, entry, moments_dict, cfg_dict, model_dir, bench_dir = args
    cfg = config_from_dict(cfg_dict)
    prep = _read_prepared(seg_path, entry)
    moments = NormalizationMoments.from_dict(moments_dict)
    bid = entry["battery_id"]
    if len(prep) == 0:
        return bid, "no qualifying observations"
    health, bench = fit_battery(prep, moments, cfg)
    dump_json(Path(model_dir) / f"{bid}.json", health.to_dict())
    dump_json(Path(bench_dir) / f"{bid}.json", bench.to_dict())
    return bid, None


def cmd_fit(ws, jobs=1):
    inputs = upstream_hashes(ws, "fit")
    cfg_hash = stage_config(ws.cfg, "fit")
    if up_to_date(ws, "fit", cfg_hash, inputs):
        return "fit: up to date"
    index = read_json(ws.work / "segment_index.json")["batteries"]
    moments = read_json(ws.work / "moments.json")
    model_dir, bench_dir = ws.work / "models", ws.work / "benchmark"
    for d in (model_dir, bench_dir):
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
    cfg_dict = to_jsonable(ws.cfg)
    tasks = [(ws.work / "segments" / f"{e['battery_id']}.csv", e, moments, cfg_dict,
              str(model_dir), str(bench_dir)) for e in index]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fit_one, tasks))
    else:
        results = [_fit_one(t) for t in tasks]
    skipped = {bid: why for bid, why in sorted(results) if why}
    outputs = sorted([*model_dir.glob("*.json"), *bench_dir.glob("*.json")])
    dump_json(ws.work / "fit_skipped.json", skipped)
    outputs.append(ws.work / "fit_skipped.json")
    write_manifest(ws, "fit", cfg_hash, inputs, ws.work, outputs,
                   {"fitted": len(results) - len(skipped), "skipped": len(skipped)})
    return f"fit: {len(results) - len(skipped)} batteries fitted, {len(skipped)} skipped"


def load_models(ws):
    models = [HealthModel.from_dict(read_json(p)) for p in sorted((ws.work / "models").glob("*.json"))]
    bench = {m.battery_id: BenchmarkModel.from_dict(read_json(ws.work / "benchmark" / f"{m.battery_id}.json"))
             for m in models}
    return models, bench


def cmd_calibrate(ws):
    inputs = upstream_hashes(ws, "calibrate")
    cfg_hash = stage_config(ws.cfg, "calibrate")
    if up_to_date(ws, "calibrate", cfg_hash, inputs):
        return "calibrate: up to date"
    models, bench = load_models(ws)
    if len(models) < 2:
        raise ValueError("calibration needs at least two fitted batteries")
    pop = fit_population(models)
    outputs = [ws.work / "population.json"]
    dump_json(outputs[0], pop.to_dict())
    tdir = ws.work / "trajectories"
    if tdir.exists():
        shutil.rmtree(tdir)
    tdir.mkdir(parents=True)
    pc = ws.cfg.population
    scale = NormalizationMoments.from_dict(read_json(ws.work / "moments.json")).time_scale
    flagged = 0
    hb = {}
    for m in models:
        traj = calibrate_trajectory(m, None, pc.max_calibration_distance, pc.horizons_days)
        flagged += traj.out_of_range
        path = tdir / f"{m.battery_id}.json"
        dump_json(path, traj.to_dict())
        outputs.append(path)
        b = bench[m.battery_id]
        hb[m.battery_id] = {str(h): b.extrapolate(float(days_to_model_time(h, scale)))[0]
                            for h in pc.horizons_days}
    dump_json(ws.work / "benchmark_horizons.json", hb)
    outputs.append(ws.work / "benchmark_horizons.json")
    write_manifest(ws, "calibrate", cfg_hash, inputs, ws.work, outputs,
                   {"trajectories": len(models), "out_of_range": flagged})
    return f"calibrate: {len(models)} trajectories ({flagged} flagged out of range)"


def cmd_features(ws):
    inputs = upstream_hashes(ws, "features")
    cfg_hash = stage_config(ws.cfg, "features")
    if up_to_date(ws, "features", cfg_hash, inputs):
        return "features: up to date"
    index = read_json(ws.work / "segment_index.json")["batteries"]
    horizons = ws.cfg.population.horizons_days
    rows = []
    for f in sorted({e["file"] for e in index}):
        series_map, _ = ingest(ws.input / f)
        for bid in sorted(series_map):
            for h, feats in stress_inputs(series_map[bid], horizons, ws.cfg.features).items():
                rows.append({"battery_id": bid, "horizon_days": h, **feats})
    rows.sort(key=lambda r: (r["battery_id"], r["horizon_days"]))
    # feature-specific moments pooled over batteries and horizons; constant features map to 0
    raw = {n: np.array([r[n] for r in rows]) for n in FEATURE_NAMES}
    fm = NormalizationMoments({n: float(x.mean()) for n, x in raw.items()},
                              {n: float(x.std()) or 1.0 for n, x in raw.items()})
    for n in FEATURE_NAMES:
        for r, z in zip(rows, normalize(raw[n], fm, n)):
            r[f"{n}_norm"] = float(z)
    path = ws.work / "features.csv"
    cols = ["battery_id", "horizon_days", *FEATURE_NAMES, *(f"{n}_norm" for n in FEATURE_NAMES)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    write_manifest(ws, "features", cfg_hash, inputs, ws.work, [path], {"rows": len(rows)})
    return f"features: {len(rows)} rows"


def read_features(path):
    df = pd.read_csv(path, dtype={"battery_id": str})
    return {(r.battery_id, int(r.horizon_days)): {n: float(getattr(r, n)) for n in FEATURE_NAMES}
            for r in df.itertuples()}


def build_table(ws):
    labels = synthfleet.read_labels(ws.input / "labels.csv")
    feats = read_features(ws.work / "features.csv")
    hb = read_json(ws.work / "benchmark_horizons.json")
    horizons = ws.cfg.population.horizons_days
    ids = sorted(p.stem for p in (ws.work / "trajectories").glob("*.json"))
    missing = [i for i in ids if i not in labels]
    if missing:
        raise ValueError(f"no label for batteries {missing[:5]}")
    from .classifier import LABELS

    inputs = {h: {} for h in horizons}
    trajs = {i: read_json(ws.work / "trajectories" / f"{i}.json") for i in ids}
    for h in horizons:
        inputs[h]["r0"] = np.array([trajs[i]["horizons"][str(h)]["r0_mean"] for i in ids])
        inputs[h]["dr0"] = np.array([trajs[i]["horizons"][str(h)]["dr0_mean"] for i in ids])
        inputs[h]["benchmark_r0"] = np.array([hb[i][str(h)] for i in ids])
        for n in FEATURE_NAMES:
            inputs[h][n] = np.array([feats[(i, h)][n] for i in ids])
    return ExampleTable(tuple(ids), np.array([LABELS[labels[i]] for i in ids]), inputs)


def cmd_classify(ws):
    inputs = upstream_hashes(ws, "classify")
    labels_path = ws.input / "labels.csv"
    if not labels_path.exists():
        raise DependencyError(f"labels file {labels_path} is missing")
    inputs["labels"] = sha256_file(labels_path)
    cfg_hash = stage_config(ws.cfg, "classify")
    if up_to_date(ws, "classify", cfg_hash, inputs):
        return "classify: up to date"
    table = build_table(ws)
    report = run_nested_cv(table, ws.cfg.classifier)
    path = ws.work / "eval_report.json"
    report.write_json(path)
    write_manifest(ws, "classify", cfg_hash, inputs, ws.work, [path],
                   {"test_cases": report.n_cases, "batteries": len(table.battery_ids)})
    return f"classify: {report.n_cases} test cases"


def cmd_report(ws):
    inputs = upstream_hashes(ws, "report")
    cfg_hash = stage_config(ws.cfg, "report")
    if up_to_date(ws, "report", cfg_hash, inputs):
        return "report: up to date"
    out = ws.output
    out.mkdir(parents=True, exist_ok=True)
    moments = NormalizationMoments.from_dict(read_json(ws.work / "moments.json"))
    pop = PopulationGP.from_dict(read_json(ws.work / "population.json"))
    files = []

    p = out / "population_slices.csv"
    write_slices_csv(p, population_slices(pop, moments, ws.cfg.population.slice_points))
    files.append(p)

    trajs = [HealthTrajectory.from_dict(read_json(f)) for f in sorted((ws.work / "trajectories").glob("*.json"))]
    p = out / "trajectories.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["battery_id", "t_days", "r0_mean", "r0_lower_2sd", "r0_upper_2sd", "dr0_dt_mean",
                    "dr0_dt_sd"])
        for tr in trajs:
            sd = np.sqrt(tr.r0_var)
            for t, m, s, d, dv in zip(tr.t_days, tr.r0_mean, sd, tr.dr0_mean, np.sqrt(tr.dr0_var)):
                w.writerow([tr.battery_id, f"{t:.4f}", f"{m:.6f}", f"{m - 2 * s:.6f}", f"{m + 2 * s:.6f}",
                            f"{d:.6f}", f"{dv:.6f}"])
    files.append(p)

    report = read_json(ws.work / "eval_report.json")
    p = out / "accuracy.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "horizon_days", "mean_balanced_accuracy", "std"])
        for r in report["summary"]:
            w.writerow([r["scenario"], r["horizon_days"], f"{r['mean']:.6f}", f"{r['std']:.6f}"])
    files.append(p)
    p = out / "relevance.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "input", "mean_inverse_length", "std_inverse_length"])
        for r in report["relevance"]:
            w.writerow([r["scenario"], r["input"], f"{r['mean']:.6f}", f"{r['std']:.6f}"])
    files.append(p)

    feats = read_features(ws.work / "features.csv")
    end = sorted((k, v) for k, v in feats.items() if k[1] == 0)
    corr, degenerate = feature_correlations(np.array([[v[n] for n in FEATURE_NAMES] for _, v in end]))
    p = out / "feature_correlations.csv"
    write_correlations_csv(p, corr)
    files.append(p)

    lines = [f"batteries: {len(trajs)}", f"test cases: {report['n_cases']}",
             "calibration point: " + ", ".join(f"{k}={moments.mean[k]:.4f}" for k in OP_COLUMNS)]
    if degenerate.any():
        lines.append("constant features (correlation set to 0): "
                     + ", ".join(n for n, d in zip(FEATURE_NAMES, degenerate) if d))
    truth = ws.input / "truth_surface.json"
    if truth.exists():
        fleet, params = synthfleet.load_truth(truth)
        point = calibration_point_raw(moments)
        p = out / "truth_comparison.csv"
        comps = [synthfleet.ground_truth_compare(tr, params[tr.battery_id], fleet, point) for tr in trajs
                 if tr.battery_id in params]
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["battery_id", "rmse_ohm", "dynamic_range_ohm", "relative_rmse", "coverage_2sd"])
            for c in comps:
                w.writerow([c.battery_id, f"{c.rmse:.6f}", f"{c.dynamic_range:.6f}",
                            f"{c.relative_rmse:.6f}", f"{c.coverage:.6f}"])
        files.append(p)
        ok = sum(c.relative_rmse <= 0.1 for c in comps)
        cov = sum(c.coverage * c.n for c in comps) / max(sum(c.n for c in comps), 1)
        lines.append(f"truth: {ok}/{len(comps)} batteries with RMSE <= 10% of range; pooled 2sd coverage {cov:.3f}")
    lines.append("balanced accuracy (mean +- std over test subsets):")
    for r in report["summary"]:
        lines.append(f"  {r['scenario']} h={r['horizon_days']:>2d}  {r['mean']:.3f} +- {r['std']:.3f}")
    p = out / "summary.txt"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    files.append(p)
    write_manifest(ws, "report", cfg_hash, inputs, out, files, {"files": len(files)})
    return "report: " + ", ".join(f.name for f in files)


# ---------------------------------------------------------------- entry point

def build_parser():
    ap = argparse.ArgumentParser(prog="sohgp", description=__doc__)
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--seed", type=int, help="override the master seed")
    ap.add_argument("--jobs", type=int, help="worker processes for per-battery stages")
    ap.add_argument("--force", action="store_true", help="overwrite existing outputs / rerun stages")
    ap.add_argument("stage", choices=STAGES + ("all",))
    return ap


def run_stage(ws, stage, jobs=1, force=False):
    if force and stage != "simulate":
        path = ws.manifest_path(stage)
        if path.exists():
            path.unlink()
    if stage == "simulate":
        return cmd_simulate(ws, force, jobs)
    if stage == "fit":
        return cmd_fit(ws, jobs)
    return {"ingest": cmd_ingest, "calibrate": cmd_calibrate, "features": cmd_features,
            "classify": cmd_classify, "report": cmd_report}[stage](ws)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs is not None:
            cfg.jobs = args.jobs
        cfg.validate()
        ws = Workspace(cfg)
        stages = STAGES[1:] if args.stage == "all" else (args.stage,)
        for stage in stages:
            print(run_stage(ws, stage, cfg.jobs, args.force))
    except (ConfigError, DependencyError, StageRefused) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
