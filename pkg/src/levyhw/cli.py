"""Command-line entry point: levyhw <subcommand> --config FILE [--seed S] [--workers N] [--out DIR]."""
from __future__ import annotations

import argparse
import csv
import gzip
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, build_driver, build_lyapunov, build_params, build_policy, canonical_json,
                     config_hash, validate_config)
from .ergodicity_lab import (FitError, ModelConfig, TailStatistic, TvCurve, empirical_tv, estimator_floor,
                             fit_exponential_rate, fit_polynomial_rate, survival_slope)
from .halfin_whitt_queue import QueueParams, approx_bound_check, fclt_compare, simulate_queue
from .levy_sources import RngStream
from .lyapunov_cert import GeneratorConfig, GridSpec, verify_drift_inequality
from .sde_model import euler_ensemble

SEED_ENV = "LEVYHW_SEED"
EVENT_NAMES = ("arrival", "service", "abandonment")
CHUNK = 2000  # replications per task; fixed so results do not depend on --workers

SUBCOMMANDS = {
    "check-config": None,
    "verify-lyapunov": "verify",
    "simulate-sde": "sde-sim",
    "tv-rate": "tv-rate",
    "tail": "tail",
    "simulate-queue": "queue-sim",
    "fclt": "fclt",
    "approx-check": "approx-check",
}

# stream ids per purpose, so that adding a purpose never shifts another's draws
STREAM_REFERENCE, STREAM_CURVE, STREAM_SIM, STREAM_QUEUE, STREAM_FCLT, STREAM_APPROX = 1, 2, 3, 4, 5, 6


class Runner:
    """Ordered map over tasks, serial or on a process pool."""

    def __init__(self, workers: int):
        self.workers = max(1, int(workers))
        self.pool = ProcessPoolExecutor(self.workers) if self.workers > 1 else None

    def map(self, fn, items):
        items = list(items)
        if self.pool is None:
            return list(map(fn, items))
        return list(self.pool.map(fn, items, chunksize=max(1, len(items) // (4 * self.workers))))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _chunks(total, size=CHUNK):
    return [(i, min(size, total - s)) for i, s in enumerate(range(0, total, size))]


class Outputs:
    def __init__(self, out_dir: Path, chash: str):
        self.dir = out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.hash = chash
        self.files = []

    def csv(self, name, header, rows, compress=False):
        path = self.dir / name
        opener = (lambda p: gzip.open(p, "wt", newline="")) if compress else (lambda p: open(p, "w", newline=""))
        with opener(path) as fh:
            fh.write(f"# config_hash={self.hash}\n")
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        self.files.append(name)

    def json(self, name, obj):
        with open(self.dir / name, "w") as fh:
            json.dump({"config_hash": self.hash, **obj}, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        self.files.append(name)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _finite(x):
    return x if isinstance(x, (int, float)) and np.isfinite(x) else (None if x is None else str(x))


# ---------------------------------------------------------------------------
# picklable task functions


def _ensemble_task(args):
    model, seed, stream, (idx, count), times, x0 = args
    rng = RngStream(seed, stream).child(idx)
    start = model.start(count) if x0 is None else np.tile(np.asarray(x0, dtype=float), (count, 1))
    out, aborted = euler_ensemble(model.params, model.policy, model.driver, start, None, model.dt, rng,
                                  checkpoints=list(times))
    return out[:, ~aborted], int(aborted.sum())


def _ensemble(runner, model, seed, stream, total, times, x0=None):
    parts = runner.map(_ensemble_task, [(model, seed, stream, c, times, x0) for c in _chunks(total)])
    return np.concatenate([p[0] for p in parts], axis=1), sum(p[1] for p in parts)


def _queue_task(args):
    qp, policy, seed, (idx, count), horizon, x0, cps, burn_in = args
    run = simulate_queue(qp, policy, horizon, RngStream(seed, STREAM_QUEUE).child(idx), x0=x0,
                         replications=count, checkpoints=cps, burn_in=burn_in)
    return run.X, run.events, run.invariant_checks, run.arrivals_after.sum(), run.waits_after.sum()


# ---------------------------------------------------------------------------
# experiments


def _model(cfg, dt=None):
    exp = cfg["experiment"]
    x0 = exp.get("x0") if exp["kind"] == "sde-sim" else None
    return ModelConfig(build_params(cfg), build_policy(cfg), build_driver(cfg),
                       dt=float(dt if dt is not None else exp.get("dt", 0.02)),
                       x0=None if x0 is None else np.asarray(x0, dtype=float))


def run_verify(cfg, out: Outputs, runner: Runner, warnings):
    exp = cfg["experiment"]
    gcfg = GeneratorConfig(build_params(cfg), build_driver(cfg), build_lyapunov(cfg))
    grid = GridSpec(radii=tuple(0.5 * 2.0**k for k in range(int(exp["max_radius_exp"]) + 1)),
                    n_random=int(exp["n_random"]), seed=int(cfg["seed"]) & 0xFFFFFFFF)
    rep = verify_drift_inequality(gcfg, exp["inequality"], grid, float(exp["compact_radius"]), map_fn=runner.map)
    if rep.preconditions:
        warnings.extend(f"precondition: {p}" for p in rep.preconditions)
    d = rep.to_dict()
    d["fitted_constants"] = {k: _finite(v) for k, v in d["fitted_constants"].items()}
    d["R0"] = _finite(d["R0"])
    out.json("drift_report.json", d)
    m = rep.points.shape[1]
    out.csv("drift_margins.csv", [f"x{i + 1}" for i in range(m)] + ["excess", "margin"],
            [list(p) + [e, g] for p, e, g in zip(rep.points, rep.excess, rep.margins)])
    return rep.passed and rep.r0 <= float(exp["compact_radius"])


def run_sde(cfg, out, runner, warnings):
    exp = cfg["experiment"]
    model = _model(cfg)
    times = exp["checkpoints"] or [exp["horizon"]]
    states, aborted = _ensemble(runner, model, cfg["seed"], STREAM_SIM, int(exp["N"]), times)
    if aborted:
        warnings.append(f"{aborted} paths aborted on overflow")
    m = model.m
    rows = [[t, r] + list(states[k, r]) for k, t in enumerate(times) for r in range(states.shape[1])]
    out.csv("sde_checkpoints.csv", ["t", "replication"] + [f"x{i + 1}" for i in range(m)], rows)
    return True


def _reference(cfg, runner, model, warnings):
    ref = cfg["experiment"]["reference"]
    times = ref["burn_in"] + ref["thinning"] * np.arange(int(ref["per_replication"]))
    states, aborted = _ensemble(runner, model, cfg["seed"], STREAM_REFERENCE, int(ref["replications"]), times)
    if aborted:
        warnings.append(f"{aborted} reference paths aborted on overflow")
    return states.reshape(-1, model.m)


def run_tv(cfg, out, runner, warnings):
    exp = cfg["experiment"]
    model = _model(cfg)
    ref = _reference(cfg, runner, model, warnings)
    x0 = np.zeros(model.m) if exp["x0"] is None else np.asarray(exp["x0"], dtype=float)
    n = int(exp["N"])
    states, aborted = _ensemble(runner, model, cfg["seed"], STREAM_CURVE, n, exp["times"], x0)
    if aborted:
        warnings.append(f"{aborted} paths aborted on overflow")
    tvs, errs = [], []
    for s in states:
        tv, err = empirical_tv(s, ref)
        tvs.append(tv)
        errs.append(err)
    floor = estimator_floor(ref, n_split=min(n, ref.shape[0] // 2))
    curve = TvCurve(exp["times"], tvs, errs, floor)
    out.csv("tv_curve.csv", ["t", "tv", "err"], zip(curve.times, curve.tv, curve.err))
    fits = {"floor": floor, "x0": x0.tolist()}
    ok = True
    for name, fn in (("polynomial", fit_polynomial_rate), ("exponential", fit_exponential_rate)):
        try:
            fits[name] = fn(curve).to_dict()
        except FitError as exc:
            fits[name] = {"error": str(exc)}
            ok = ok and name != exp["fit"]
    if n < 10_000 or np.nanmax(curve.err) > 0.25 * max(floor, 1e-12) * 10:
        warnings.append("wide Monte Carlo error on the TV curve; increase N")
    out.json("fits.json", fits)
    return ok


def run_tail(cfg, out, runner, warnings):
    exp = cfg["experiment"]
    model = _model(cfg)
    times = exp["burn_in"] + exp["thinning"] * np.arange(int(exp["per_replication"]))
    states, aborted = _ensemble(runner, model, cfg["seed"], STREAM_SIM, int(exp["replications"]), times)
    if aborted:
        warnings.append(f"{aborted} paths aborted on overflow")
    stat = TailStatistic.from_states(states.reshape(-1, model.m), model.params.mu)
    pos = stat.positive_part
    hill = stat.hill(exp["k"])
    top = np.sort(pos)[::-1][: 2 * hill.k]
    out.csv("tail.csv", ["rank", "value"], zip(range(1, top.size + 1), top))
    res = {"hill": hill.to_dict(), "n_positive": int(pos.size), "n_total": int(stat.projection.size)}
    try:
        res["survival_slope"] = survival_slope(pos)
    except FitError as exc:
        res["survival_slope"] = str(exc)
    if not hill.stable:
        warnings.append("Hill estimate varies with k")
    out.json("fits.json", res)
    return True


def _queue_params(cfg, n):
    exp = cfg["experiment"]
    p = build_params(cfg)
    return QueueParams(int(n), exp["lam"], p.ell, p.mu, p.gamma, build_driver(cfg).alpha or 1.5,
                       (exp.get("family", "pareto_batch"),))


def run_queue(cfg, out, runner, warnings):
    exp = cfg["experiment"]
    qp = _queue_params(cfg, exp["n"])
    policy = build_policy(cfg)
    x0 = qp.unhat(np.zeros(qp.m) if exp["x0"] is None else np.asarray(exp["x0"], dtype=float))
    cps = exp["checkpoints"] or [exp["horizon"]]
    parts = runner.map(_queue_task, [(qp, policy, cfg["seed"], c, exp["horizon"], x0, cps, exp["burn_in"])
                                     for c in _chunks(int(exp["replications"]), 500)])
    X = np.concatenate([p[0] for p in parts], axis=1)
    xh = qp.hat(X)
    rows = [[t, r] + list(X[k, r]) + list(xh[k, r]) for k, t in enumerate(cps) for r in range(X.shape[1])]
    m = qp.m
    out.csv("queue_checkpoints.csv", ["t", "replication"] + [f"X{i + 1}" for i in range(m)]
            + [f"xhat{i + 1}" for i in range(m)], rows)
    arrivals, waits = sum(p[3] for p in parts), sum(p[4] for p in parts)
    out.json("queue_summary.json", {"events": sum(p[1] for p in parts), "invariant_checks": sum(p[2] for p in parts),
                                    "arrivals_after_burn_in": int(arrivals), "waits": int(waits),
                                    "wait_probability": waits / arrivals if arrivals else None})
    if exp["event_log"]:
        run = simulate_queue(qp, policy, exp["horizon"], RngStream(cfg["seed"], STREAM_QUEUE).child(10**6),
                             x0=x0, record=True)
        out.csv("event_log.csv.gz", ["t", "event_type", "class"] + [f"X{i + 1}" for i in range(m)],
                ([e[0], EVENT_NAMES[e[1]], e[2]] + list(e[3]) for e in run.log), compress=True)
    return True


def run_fclt(cfg, out, runner, warnings):
    exp = cfg["experiment"]
    base = _queue_params(cfg, exp["ns"][0])
    x0 = None if exp["x0"] is None else np.asarray(exp["x0"], dtype=float)
    res = fclt_compare(base, exp["ns"], build_policy(cfg), float(exp["horizon"]), int(exp["N"]),
                       RngStream(cfg["seed"], STREAM_FCLT), x0=x0, sde_dt=float(exp["sde_dt"]),
                       xi=cfg["driver"].get("xi") if exp.get("use_config_xi") else None)
    med = [r["median_ks"] for r in res["per_n"]]
    res["median_ks_nonincreasing"] = bool(all(b <= a for a, b in zip(med, med[1:])))
    out.json("fclt.json", res)
    return res["median_ks_nonincreasing"]


def run_approx(cfg, out, runner, warnings):
    exp = cfg["experiment"]
    policy = build_policy(cfg)
    res = []
    for k, n in enumerate(exp["ns"]):
        qp = _queue_params(cfg, n)
        res.append(approx_bound_check(n, policy, qp, int(exp["samples"]), float(exp["radius_factor"]),
                                      RngStream(cfg["seed"], STREAM_APPROX).child(k)))
    out.json("approx.json", {"checks": res})
    return all(r["holds"] for r in res)


RUNNERS = {"verify": run_verify, "sde-sim": run_sde, "tv-rate": run_tv, "tail": run_tail,
           "queue-sim": run_queue, "fclt": run_fclt, "approx-check": run_approx}


def run_experiment(cfg: dict, out_dir, workers: int = 1) -> dict:
    """Run a validated config; writes artifacts plus manifest.json and returns the manifest."""
    t0 = time.time()
    chash = config_hash(cfg)
    out = Outputs(Path(out_dir), chash)
    warnings = []
    runner = Runner(workers)
    try:
        ok = RUNNERS[cfg["experiment"]["kind"]](cfg, out, runner, warnings)
    finally:
        runner.close()
    with open(out.dir / "config.resolved.json", "w") as fh:
        fh.write(canonical_json(cfg) + "\n")
    out.files.append("config.resolved.json")
    manifest = {"config_hash": chash, "code_version": __version__, "wall_time_s": round(time.time() - t0, 3),
                "outputs": sorted(out.files), "warnings": warnings, "acceptance_passed": bool(ok),
                "kind": cfg["experiment"]["kind"], "seed": cfg["seed"]}
    with open(out.dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _seed_fallback(flag):
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else None


def build_parser():
    ap = argparse.ArgumentParser(prog="levyhw", description="Ergodicity experiments for Levy-driven queueing diffusions.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--seed", type=int, default=None, help=f"used when the config has no seed (else ${SEED_ENV})")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--out", type=Path, default=Path("out"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    kind = SUBCOMMANDS[args.command]
    if kind is not None:
        exp = raw.setdefault("experiment", {})
        if exp.get("kind", kind) != kind:
            print(f"error: config experiment kind {exp['kind']!r} does not match {args.command}", file=sys.stderr)
            return 2
        exp["kind"] = kind
    try:
        cfg = validate_config(raw, _seed_fallback(args.seed))
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    if kind is None:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    manifest = run_experiment(cfg, args.out, args.workers)
    for w in manifest["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    print(json.dumps({k: manifest[k] for k in ("kind", "config_hash", "acceptance_passed", "outputs")}))
    return 0 if manifest["acceptance_passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
