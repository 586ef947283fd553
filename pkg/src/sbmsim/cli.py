"""Command-line orchestration: config ingestion, experiment dispatch,
run-manifest persistence, and data emission.

Exit codes are stable API: 0 success, 1 gate failure, 2 configuration or
precondition error, 3 numerical abort.  Every data file a run emits is
byte-reproducible from (config, seed); wall-clock metadata lives only in
the run manifest.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__, verify
from .branching import BranchingSpec, make_rate
from .errors import ConfigurationError, NumericalAbort, RefusalError
from .noise import independent_streams
from .solver import (
    SimConfig,
    simulate_blocked,
    simulate_density,
    simulate_distribution_system,
    simulate_mild,
    simulate_total_mass,
)

CHUNK = 256   # replicate rows per noise stream; fixed so --threads never
              # changes the numbers, only the pool size

DEFAULT_EPS = (0.0, 1e-3, 1e-2)


# ---------------------------------------------------------------------------
# configuration ingestion

def _get(doc, path, default=None):
    cur = doc
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            return default
        cur = cur[part]
    return cur


def build_config(doc: dict) -> tuple[SimConfig, dict]:
    """Normalize a raw configuration document into a validated SimConfig
    plus the auxiliary (verify/output) sections.  Raises ConfigurationError
    carrying every violation with its field path."""
    problems = []

    rates = []
    raw_rates = _get(doc, "branching.rates", [{"name": "constant", "value": 1.0}])
    for i, spec in enumerate(raw_rates):
        spec = dict(spec)
        name = spec.pop("name", None)
        try:
            rates.append(make_rate(name, **spec))
        except ConfigurationError as exc:
            problems.extend((f"branching.rates[{i}].{p}" if p else
                             f"branching.rates[{i}]", m)
                            for p, m in exc.violations)
        except TypeError as exc:
            problems.append((f"branching.rates[{i}]", str(exc)))

    branching = None
    if not problems:
        try:
            branching = BranchingSpec(
                partition=tuple(_get(doc, "branching.partition", [])),
                rates=tuple(rates),
                beta=float(_get(doc, "branching.beta", 1.0)),
            )
        except ConfigurationError as exc:
            problems.extend(exc.violations)

    config = None
    if branching is not None:
        config = SimConfig(
            half_width=float(_get(doc, "grid.half_width", 6.0)),
            dx=float(_get(doc, "grid.dx", 0.02)),
            dt=float(_get(doc, "time.dt", 2e-4)),
            horizon=float(_get(doc, "time.horizon", 1.0)),
            outputs=int(_get(doc, "time.outputs", 11)),
            initial=dict(_get(doc, "initial",
                              {"profile": "gaussian", "mass": 1.0,
                               "center": 0.0, "sigma": 1.0})),
            branching=branching,
            scheme=_get(doc, "scheme.kind", "explicit-fd"),
            blocks=_get(doc, "scheme.m"),
            seed=int(_get(doc, "seed", 0)),
            z_max=_get(doc, "u_system.z_max"),
            z_cells=int(_get(doc, "u_system.z_cells", 2048)),
        )
        problems.extend(config.validate())

    if problems:
        raise ConfigurationError(problems)
    extras = {"verify": _get(doc, "verify", {}) or {},
              "output": _get(doc, "output", {}) or {}}
    return config, extras


def validate_config(path_or_doc):
    """Load and normalize a configuration; returns (config, extras) or
    raises ConfigurationError listing each offending field."""
    if isinstance(path_or_doc, dict):
        return build_config(path_or_doc)
    with open(path_or_doc) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError([("", f"not valid JSON: {exc}")]) from None
    return build_config(doc)


def _resolved_doc(config: SimConfig, extras: dict) -> dict:
    return {
        "grid": {"half_width": config.half_width, "dx": config.dx},
        "time": {"dt": config.dt, "horizon": config.horizon,
                 "outputs": config.outputs},
        "initial": config.initial,
        "branching": {
            "partition": list(config.branching.partition),
            "rates": [{"name": r.name, **r.params} for r in config.branching.rates],
            "beta": config.branching.beta,
        },
        "scheme": {"kind": config.scheme, "m": config.blocks},
        "seed": config.seed,
        "u_system": {"z_max": config.z_max, "z_cells": config.z_cells},
        "verify": extras.get("verify", {}),
        "output": extras.get("output", {}),
    }


# ---------------------------------------------------------------------------
# replicated runs (fixed chunking keeps results independent of the pool size)

_OBSERVER_BUILDERS = {}


def _register_observer(kind):
    def deco(fn):
        _OBSERVER_BUILDERS[kind] = fn
        return fn
    return deco


@_register_observer("test_function")
def _build_tf(config, params):
    phi = verify.make_test_function(**params)
    return verify.TestFunctionObserver(phi)


@_register_observer("duality")
def _build_duality(config, params):
    return verify.DualityObserver(config.branching)


@_register_observer("probe")
def _build_probe(config, params):
    return verify.ProbeObserver(params["indices"])


@_register_observer("weighted_moment")
def _build_wm(config, params):
    return verify.WeightedMomentObserver(params.get("p", 1))


def _chunk_sizes(replicates, chunk=CHUNK):
    full, rest = divmod(replicates, chunk)
    return [chunk] * full + ([rest] if rest else [])


def _run_chunk(args):
    config, seed, nreps, specs, kind, store_fields = args
    observers = [_OBSERVER_BUILDERS[k](config, p) for k, p in specs]
    if kind == "u-system":
        traj = simulate_distribution_system(config, seed=seed, nreps=nreps)
        return {"tail": traj.tail, "times": traj.times,
                "repairs": traj.repairs, "saturations": traj.saturations}
    runner = {"explicit-fd": simulate_density, "mild": simulate_mild}.get(
        config.scheme, simulate_density)
    if config.scheme == "blocked":
        traj = simulate_blocked(config, seed=seed, nreps=nreps,
                                observers=observers, store_fields=store_fields)
    else:
        traj = runner(config, seed=seed, nreps=nreps, observers=observers,
                      store_fields=store_fields)
    payload = {"mass": traj.mass, "times": traj.times, "repairs": traj.repairs,
               "observers": [ob.result() for ob in observers]}
    if store_fields:
        # transposed so the replicate axis sits where the merger concatenates
        payload["final_field"] = traj.fields[-1].T
    return payload


def _merge(values):
    first = values[0]
    if isinstance(first, dict):
        return {k: _merge([v[k] for v in values]) for k in first}
    if isinstance(first, (list, tuple)):
        return [_merge([v[i] for v in values]) for i in range(len(first))]
    if isinstance(first, np.ndarray):
        if first.ndim >= 2:
            return np.concatenate(values, axis=1)
        return first
    if isinstance(first, (int, np.integer)):
        return int(sum(values))
    return first


def run_replicated(config, replicates, seed, observer_specs=(), threads=1,
                   kind="density", store_fields=False):
    """Run ``replicates`` rows in fixed-size chunks, one derived noise
    stream per chunk, merging chunk payloads in chunk order."""
    sizes = _chunk_sizes(replicates)
    seeds = independent_streams(seed, len(sizes))
    jobs = [(config, s, n, list(observer_specs), kind, store_fields)
            for s, n in zip(seeds, sizes)]
    if threads and threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            payloads = list(pool.map(_run_chunk, jobs))
    else:
        payloads = [_run_chunk(j) for j in jobs]
    return _merge(payloads)


# ---------------------------------------------------------------------------
# emission

def _fmt(v) -> str:
    return repr(float(v))


def write_trajectory_csv(path, traj):
    with open(path, "w") as fh:
        fh.write("# sbm-trajectory v1\n")
        fh.write("t,x,value\n")
        for j, t in enumerate(traj.times):
            row = traj.fields[j][0]
            for x, v in zip(traj.x_grid, row):
                fh.write(f"{_fmt(t)},{_fmt(x)},{_fmt(v)}\n")


def write_trajectory_json(path, traj):
    doc = {
        "format": "sbm-trajectory v1",
        "times": [float(t) for t in traj.times],
        "x": [float(x) for x in traj.x_grid],
        "fields": [[float(v) for v in traj.fields[j][0]]
                   for j in range(len(traj.times))],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def write_distribution_csv(path, traj):
    with open(path, "w") as fh:
        fh.write("# sbm-trajectory v1\n")
        fh.write("t,x,value,interval\n")
        for j, t in enumerate(traj.times):
            for i, (xg, fields) in enumerate(zip(traj.interval_grids, traj.fields)):
                for x, v in zip(xg, fields[j][0]):
                    fh.write(f"{_fmt(t)},{_fmt(x)},{_fmt(v)},{i}\n")


def write_mass_csv(path, mp):
    with open(path, "w") as fh:
        fh.write("# sbm-masspath v1\n")
        fh.write("t,path,value\n")
        for j, t in enumerate(mp.times):
            for p in range(mp.npaths):
                fh.write(f"{_fmt(t)},{p},{_fmt(mp.values[j, p])}\n")


def write_report(path, command, seed, reports, extra=None):
    doc = {
        "artifact": "sbmsim",
        "version": __version__,
        "command": command,
        "seed": int(seed),
        "gates": [r.to_dict(include_runtime=False) for r in reports],
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def print_report_table(reports):
    width = max((len(r.name) for r in reports), default=10)
    for r in reports:
        mark = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {mark}  estimate={r.estimate:.6g} "
              f"stderr={r.stderr:.3g}  [{r.runtime_s:.1f}s]  gate: {r.gate}")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class RunWriter:
    """Stage files in a temp directory, then move them into place and write
    the manifest last, so a run directory is never half-written."""

    def __init__(self, out_dir, config, extras, seed):
        self.out_dir = os.path.abspath(out_dir)
        self.config = config
        self.extras = extras
        self.seed = int(seed)
        self.started = datetime.datetime.now(datetime.timezone.utc)
        parent = os.path.dirname(self.out_dir) or "."
        os.makedirs(parent, exist_ok=True)
        self.stage = tempfile.mkdtemp(prefix=".sbm-stage-", dir=parent)
        self.files = []

    def path(self, name):
        self.files.append(name)
        return os.path.join(self.stage, name)

    def finalize(self, stream_seeds=()):
        resolved = _resolved_doc(self.config, self.extras)
        blob = json.dumps(resolved, sort_keys=True).encode()
        manifest = {
            "artifact_version": __version__,
            "config_hash": hashlib.sha256(blob).hexdigest(),
            "config": resolved,
            "base_seed": self.seed,
            "stream_seeds": [int(s) for s in stream_seeds],
            "started_utc": self.started.isoformat(),
            "finished_utc": datetime.datetime.now(
                datetime.timezone.utc).isoformat(),
            "files": [
                {"name": n, "sha256": _sha256(os.path.join(self.stage, n)),
                 "bytes": os.path.getsize(os.path.join(self.stage, n))}
                for n in self.files
            ],
        }
        with open(os.path.join(self.stage, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")
        os.makedirs(self.out_dir, exist_ok=True)
        for name in self.files + ["manifest.json"]:
            os.replace(os.path.join(self.stage, name),
                       os.path.join(self.out_dir, name))
        os.rmdir(self.stage)
        return manifest


# ---------------------------------------------------------------------------
# subcommand handlers

def _effective_seed(args, config):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SBM_SEED")
    if env is not None:
        return int(env)
    return config.seed


def cmd_simulate(args):
    config, extras = validate_config(args.config)
    seed = _effective_seed(args, config)
    if config.scheme == "blocked":
        traj = simulate_blocked(config, seed=seed, nreps=1)
    elif config.scheme == "mild":
        traj = simulate_mild(config, seed=seed, nreps=1)
    else:
        traj = simulate_density(config, seed=seed, nreps=1)
    writer = RunWriter(args.out, config, extras, seed)
    fmt = args.format or extras["output"].get("format", "csv")
    if fmt == "json":
        write_trajectory_json(writer.path("trajectory.json"), traj)
    else:
        write_trajectory_csv(writer.path("trajectory.csv"), traj)
    writer.finalize(stream_seeds=[traj.stream_seed])
    print(f"wrote {args.out} (scheme={traj.scheme}, repairs={traj.repairs})")
    return 0


def cmd_simulate_u(args):
    config, extras = validate_config(args.config)
    seed = _effective_seed(args, config)
    traj = simulate_distribution_system(config, seed=seed, nreps=1)
    writer = RunWriter(args.out, config, extras, seed)
    write_distribution_csv(writer.path("u-trajectory.csv"), traj)
    writer.finalize(stream_seeds=traj.stream_seeds)
    print(f"wrote {args.out} (repairs={traj.repairs}, "
          f"saturations={traj.saturations})")
    return 0


def _mass_params(extras, config):
    m = extras["verify"].get("mass", {})
    return {
        "rate": config.branching.rates[-1],
        "z0": float(m.get("z0", config.initial_mass())),
        "horizon": float(m.get("horizon", config.horizon)),
        "dt": float(m.get("dt", 1e-3)),
    }


def cmd_simulate_mass(args):
    config, extras = validate_config(args.config)
    seed = _effective_seed(args, config)
    p = _mass_params(extras, config)
    npaths = args.replicates or int(extras["verify"].get("mass", {}).get("paths", 1))
    mp = simulate_total_mass(p["rate"], p["z0"], p["horizon"], p["dt"],
                             seed=seed, npaths=npaths)
    writer = RunWriter(args.out, config, extras, seed)
    write_mass_csv(writer.path("masspath.csv"), mp)
    writer.finalize()
    print(f"wrote {args.out} ({npaths} paths)")
    return 0


def _emit_gates(args, config, extras, seed, reports, check_name,
                stream_seeds=()):
    print_report_table(reports)
    writer = RunWriter(args.out, config, extras, seed)
    write_report(writer.path("report.json"), check_name, seed, reports)
    writer.finalize(stream_seeds=stream_seeds)
    return 0 if all(r.passed for r in reports) else 1


def cmd_verify(args):
    config, extras = validate_config(args.config)
    seed = _effective_seed(args, config)
    vconf = extras["verify"]
    replicates = args.replicates or int(vconf.get("replicates", 200))
    threads = args.threads if args.threads is not None else 0
    if threads == 0:
        threads = min(os.cpu_count() or 1, 4)
    check = args.check

    if check == "feller":
        p = _mass_params(extras, config)
        npaths = args.replicates or int(vconf.get("mass", {}).get("paths", 100_000))
        mp = simulate_total_mass(p["rate"], p["z0"], p["horizon"], p["dt"],
                                 seed=seed, npaths=npaths)
        lambdas = [float(v) for v in vconf.get("lambdas", [0.5, 1.0, 2.0])]
        rep = verify.check_feller_transform(mp.terminal(), p["z0"],
                                            config.branching.rates[-1],
                                            p["horizon"], lambdas)
        return _emit_gates(args, config, extras, seed, [rep], "verify feller")

    if check == "stability":
        sconf = vconf.get("stability", {})
        eps = [float(e) for e in sconf.get("eps", DEFAULT_EPS)]
        horizon = float(sconf.get("horizon", min(config.horizon, 0.25)))
        rep = verify.pathwise_stability(config, seed, eps_list=eps,
                                        horizon=horizon)
        return _emit_gates(args, config, extras, seed, [rep], "verify stability")

    if check == "mp":
        merged = run_replicated(config, replicates, seed,
                                [("test_function", {"name": "one"})], threads)
        rep = verify.check_mass_martingale(merged["mass"], merged["times"],
                                           config.initial_mass())
        return _emit_gates(args, config, extras, seed, [rep], "verify mp")

    if check == "qv":
        tf_spec = vconf.get("test_function", {"name": "one"})
        merged = run_replicated(config, replicates, seed,
                                [("test_function", tf_spec)], threads)
        rep = verify.check_quadratic_variation(merged["observers"][0],
                                               merged["times"])
        return _emit_gates(args, config, extras, seed, [rep], "verify qv")

    if check == "moments":
        p = int(vconf.get("p", 1))
        merged = run_replicated(config, replicates, seed,
                                [("weighted_moment", {"p": p})], threads)
        rep = verify.check_weighted_moments(merged["observers"][0]["values"],
                                            merged["times"], p)
        return _emit_gates(args, config, extras, seed, [rep], "verify moments")

    if check == "duality":
        merged = run_replicated(config, replicates, seed, [("duality", {})],
                                threads)
        reps = verify.duality_residual(merged["observers"][0], merged["times"])
        return _emit_gates(args, config, extras, seed, reps, "verify duality")

    if check == "hoelder":
        return _cmd_verify_hoelder(args, config, extras, seed, vconf,
                                   replicates, threads)
    raise ConfigurationError([("verify", f"unknown check {check!r}")])


def _window_report(name, hr, window, extra_ok=True):
    lo, hi = window
    ok = (lo <= hr.implied_exponent <= hi) and extra_ok
    return verify.VerificationReport(
        name=name,
        estimate=hr.implied_exponent,
        stderr=0.5 * (hr.ci[1] - hr.ci[0]),
        gate=f"implied exponent in [{lo}, {hi}]",
        passed=bool(ok),
        n_replicates=0,
        details=hr.to_dict(),
    )


def _cmd_verify_hoelder(args, config, extras, seed, vconf, replicates, threads):
    hconf = vconf.get("hoelder", {})
    p = int(hconf.get("p", 2))
    # estimator self-test on a Brownian control: known exponent 1/2
    bc = verify.brownian_control_series(seed=seed + 1, nreps=200)
    hr0 = verify.estimate_hoelder_exponent(bc["series"], bc["dt"], "time", p=p,
                                           lags=[8, 16, 32, 64, 128],
                                           boot_seed=seed + 2)
    rep0 = _window_report("hoelder_self_test", hr0, (0.45, 0.55))
    reports = [rep0]
    if rep0.passed:
        center = config.nx // 2
        offset = max(config.nx // 16, 2)
        probes = [center - offset, center, center + offset]
        merged = run_replicated(config, replicates, seed,
                                [("probe", {"indices": probes})], threads,
                                store_fields=True)
        series = merged["observers"][0]["series"]
        hr_t = verify.estimate_hoelder_exponent(series, config.dt, "time", p=p,
                                                boot_seed=seed + 3)
        reports.append(_window_report(
            "hoelder_time", hr_t,
            tuple(hconf.get("window_time", (0.15, 0.35)))))
        field = merged["final_field"].T
        hr_x = verify.estimate_hoelder_exponent(field, config.dx, "space", p=p,
                                                lags=[2, 4, 8, 16],
                                                boot_seed=seed + 4,
                                                interior=config.nx // 8)
        reports.append(_window_report(
            "hoelder_space", hr_x,
            tuple(hconf.get("window_space", (0.35, 0.6)))))
    return _emit_gates(args, config, extras, seed, reports, "verify hoelder")


def cmd_appendix(args):
    if args.what == "hk":
        k_list = [int(k) for k in (args.k.split(",") if args.k else (4, 8, 16, 32))]
        names = ("x", "x_squared")
        reports = [verify.check_boundary_window_limits(n, k_list) for n in names]
        config, extras = (validate_config(args.config) if args.config
                          else build_config({}))
        seed = _effective_seed(args, config)
        return _emit_gates(args, config, extras, seed, reports, "appendix hk")

    # boundary: tabulate the boundary functional of a deterministic flow
    config, extras = (validate_config(args.config) if args.config
                      else build_config({}))
    seed = _effective_seed(args, config)
    from .kernels import semigroup_convolve
    from .verify import boundary_functional, make_test_function

    xg = np.linspace(0.0, 1.0, 201)
    u0 = np.cumsum(np.insert(
        0.5 * (xg[1] - xg[0]) * (np.exp(-8 * (xg[1:] - 0.5) ** 2)
                                 + np.exp(-8 * (xg[:-1] - 0.5) ** 2)), 0, 0.0))
    phis = [make_test_function("one"), make_test_function("linear"),
            make_test_function("ramp_flat", left=0.0, right=1.0)]
    times = [0.0, 0.01, 0.02, 0.04]
    writer = RunWriter(args.out, config, extras, seed)
    with open(writer.path("boundary-functional.csv"), "w") as fh:
        fh.write("t,phi,value\n")
        for t in times:
            u = u0 if t == 0 else semigroup_convolve(u0, t, xg[1] - xg[0])
            for phi in phis:
                val = boundary_functional(xg, u, phi)
                fh.write(f"{_fmt(t)},{phi.name},{_fmt(val)}\n")
    writer.finalize()
    print(f"wrote {args.out}/boundary-functional.csv")
    return 0


def cmd_study(args):
    config, extras = validate_config(args.config)
    seed = _effective_seed(args, config)
    if args.what == "refine":
        dx_list = ([float(v) for v in args.dx.split(",")] if args.dx
                   else [0.08, 0.04, 0.02])
        rep = verify.duality_refinement_study(config, dx_list, seed=seed)
        return _emit_gates(args, config, extras, seed, [rep], "study refine")
    m_list = ([int(v) for v in args.m.split(",")] if args.m
              else [1, 2, 4, 8, 16])
    rep = verify.blocked_convergence_study(config, m_list, seed=seed)
    return _emit_gates(args, config, extras, seed, [rep], "study blocked")


# ---------------------------------------------------------------------------
# entry point

def _add_common(p, out_default):
    p.add_argument("--config", help="path to the JSON configuration")
    p.add_argument("--seed", type=int, default=None,
                   help="base seed (fallback: SBM_SEED, then the config)")
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--threads", type=int, default=None,
                   help="worker pool size for replicate fan-out (0 = auto)")
    p.add_argument("--format", choices=("csv", "json"), default=None)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sbmsim",
        description="simulation and verification for an interacting branching "
                    "density, its interval distribution functions, and the "
                    "total-mass diffusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="one density trajectory")
    _add_common(p, "sbm-out")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("simulate-u", help="one interval-distribution trajectory")
    _add_common(p, "sbm-out")
    p.set_defaults(fn=cmd_simulate_u)

    p = sub.add_parser("simulate-mass", help="total-mass diffusion paths")
    _add_common(p, "sbm-out")
    p.set_defaults(fn=cmd_simulate_mass)

    p = sub.add_parser("verify", help="statistical identity checks")
    p.add_argument("check", choices=("mp", "qv", "hoelder", "duality",
                                     "feller", "moments", "stability"))
    _add_common(p, "sbm-verify")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("appendix", help="boundary-window limit tables")
    p.add_argument("what", choices=("hk", "boundary"))
    p.add_argument("--k", help="comma-separated window indices")
    _add_common(p, "sbm-appendix")
    p.set_defaults(fn=cmd_appendix)

    p = sub.add_parser("study", help="refinement and blocked-scheme studies")
    p.add_argument("what", choices=("refine", "blocked"))
    p.add_argument("--dx", help="comma-separated grid steps (refine)")
    p.add_argument("--m", help="comma-separated block counts (blocked)")
    _add_common(p, "sbm-study")
    p.set_defaults(fn=cmd_study)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        for path, msg in exc.violations:
            print(f"config error: {path}: {msg}" if path
                  else f"config error: {msg}", file=sys.stderr)
        return 2
    except RefusalError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
