"""Command-line entry point: ``privgfl {run,validate-graph,account,diagnostics}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
arguments, 3 combination matrix failed validation.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import diagnostics, engine, graph, privacy, tasks
from . import rng as _rng

OUTPUT_ENV = "PRIVGFL_OUTPUT"
METRIC_COLUMNS = ("iteration", "msd_centroid", "msd_avg", "disagreement", "test_error", "epsilon")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_GRAPH = 0, 1, 2, 3


class UsageError(Exception):
    """Bad input that maps to exit code 2."""


# --------------------------------------------------------------- builders

def build_topology(cfg: cfgmod.ExperimentConfig) -> graph.Topology:
    g, P = cfg.graph, cfg.task["P"]
    if g["preset"] == "complete":
        return graph.Topology.complete(P)
    if g["preset"] == "ring":
        return graph.Topology.ring(P)
    if g["preset"] == "erdos_renyi":
        return graph.Topology.erdos_renyi(P, g["p"], g["seed"])
    try:
        return graph.Topology.from_edges(P, [tuple(e) for e in g["edges"]])
    except graph.GraphError as exc:
        raise cfgmod.ConfigError("graph.edges", str(exc)) from None


def build_dataset(cfg: cfgmod.ExperimentConfig, run_seed: int) -> tasks.FederatedDataset:
    t = cfg.task
    seed = t["data_seed"] if t["data_seed"] is not None else run_seed
    if t["kind"] == "csv":
        kind = tasks.REGRESSION if t["target"] == "regression" else tasks.CLASSIFICATION
        return tasks.load_csv(t["path"], t["P"], t["K"], t["partition"], kind, t["test_path"])
    if t["N_total"] is not None:
        N = tasks.partition_counts(t["N_total"], t["P"], t["K"], t["partition"])
    else:
        lo, hi = cfgmod._int_pair("task.N", t["N"])
        N = lo if lo == hi else _rng.stream(seed, _rng.DATA, 4).integers(
            lo, hi + 1, size=(t["P"], t["K"]))
    if t["kind"] == "regression":
        return tasks.generate_regression(t["P"], t["K"], N, t["M"], seed,
                                         eig_range=tuple(t["eig_range"]),
                                         noise_var_range=tuple(t["noise_var"]))
    return tasks.generate_classification(t["P"], t["K"], N, t["M"], seed,
                                         test_size=t["test_size"], shift=t["shift"],
                                         label_noise=t["label_noise"])


def build_loss(cfg: cfgmod.ExperimentConfig, data: tasks.FederatedDataset) -> tasks.Loss:
    return tasks.Loss.for_task(data.task_kind, cfg.task["rho"])


def build_oracle(cfg: cfgmod.ExperimentConfig, data, loss, override: str | None = None):
    """Global optimum for MSD metrics, or ``None`` when no oracle is configured."""
    mode = override or cfg.task["oracle"]
    if mode == "auto":
        if data.task_kind == tasks.REGRESSION and data.ground_truth is not None:
            mode = "closed_form"
        else:
            return None
    if mode == "none":
        return None
    if mode == "closed_form":
        return tasks.closed_form_optimum(data, loss.rho).w_o
    return tasks.numeric_optimum(data, loss)


def build_train_config(cfg: cfgmod.ExperimentConfig, scheme: str, seed: int) -> engine.TrainConfig:
    tr, pv = cfg.train, cfg.privacy
    return engine.TrainConfig(
        mu=tr["mu"],
        rounds=tr["rounds"],
        L=tr["L"],
        epochs=tuple(tr["epochs"]),
        batch=tuple(tr["batch"]),
        scheme=privacy.PerturbationScheme.from_variance(scheme, pv["sigma_g_sq"]),
        client_masking=pv["masking"],
        seed=seed,
        workers=tr["workers"],
        mask_scale=pv["mask_scale"],
        dh=privacy.DHParams(pv["dh_modulus"], pv["dh_generator"]),
        account_B=pv["B"],
        clip_B=tr["clip_B"],
    )


# ----------------------------------------------------------------- output

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def metrics_csv(rows) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(v) for v in (r.i, r.msd_centroid, r.msd_avg,
                                                r.disagreement, r.test_error, r.epsilon)))
    return "\n".join(lines) + "\n"


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _value_tag(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def output_name(scheme: str, point: dict, seed: int) -> str:
    parts = [scheme] + [f"{path}={_value_tag(v)}" for path, v in point.items()] + [f"seed{seed}"]
    return "__".join(parts).replace("/", "_").replace(" ", "") + ".csv"


def resolve_output(cfg: cfgmod.ExperimentConfig, flag: str | None) -> Path:
    return Path(flag or os.environ.get(OUTPUT_ENV) or cfg.output)


# -------------------------------------------------------------------- run

def _run_job(cfg: cfgmod.ExperimentConfig, point: dict, master_seed: int, run_seed: int,
             out_dir: str) -> list[tuple[str, str, dict, int]]:
    data = build_dataset(cfg, run_seed)
    loss = build_loss(cfg, data)
    A = graph.build_metropolis(build_topology(cfg))
    w_o = build_oracle(cfg, data, loss)
    written = []
    for scheme in cfg.privacy["schemes"]:
        result = engine.run(build_train_config(cfg, scheme, run_seed), A, data, loss, w_o)
        name = output_name(scheme, point, master_seed)
        write_atomic(Path(out_dir) / name, metrics_csv(result.metrics))
        written.append((name, scheme, point, master_seed))
    return written


def _manifest_line(name: str, scheme: str, point: dict, seed: int) -> str:
    sweep = ";".join(f"{k}={_value_tag(v)}" for k, v in point.items()) or "-"
    return f"{name}\t{scheme}\t{sweep}\t{seed}\n"


def cmd_run(args) -> int:
    cfg = cfgmod.load(args.config)
    points = cfg.points()
    # fail on configuration problems before any training
    for _, _, pcfg in points:
        try:
            graph.build_metropolis(build_topology(pcfg))
        except graph.GraphError as exc:
            raise cfgmod.ConfigError("graph", str(exc)) from None
    out = resolve_output(cfg, args.output)
    jobs = [(pcfg, point, seed, _rng.derive_seed(seed, _rng.SWEEP, idx))
            for idx, point, pcfg in points for seed in cfg.seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            futures = [ex.submit(_run_job, *j, str(out)) for j in jobs]
            results = [f.result() for f in futures]
    else:
        results = [_run_job(*j, str(out)) for j in jobs]
    lines = [_manifest_line(*w) for written in results for w in written]
    write_atomic(out / "manifest.tsv", "".join(lines))
    print(f"wrote {len(lines)} metrics files to {out}")
    return EXIT_OK


# --------------------------------------------------------- validate-graph

def cmd_validate_graph(args) -> int:
    cfg = cfgmod.load(args.config)
    topo = build_topology(cfg)
    try:
        A = graph.build_metropolis(topo)
    except graph.GraphError as exc:
        print(f"FAIL connected: {exc}")
        return EXIT_GRAPH
    report = graph.validate(A, tol=args.tol)
    print(report.format().rstrip("\n"))
    return EXIT_OK if report.passed else EXIT_GRAPH


# ----------------------------------------------------------------- account

def cmd_account(args) -> int:
    if args.i < 1:
        raise UsageError("--i must be at least 1")
    if args.mu <= 0 or args.B <= 0:
        raise UsageError("--mu and --B must be positive")
    if args.sigma_g is not None:
        if args.sigma_g < 0:
            raise UsageError("--sigma-g must be nonnegative")
        acct = privacy.PrivacyAccount(args.mu, args.B, args.sigma_g)
        print("iteration,epsilon")
        for j, eps in enumerate(acct.schedule(args.i), start=1):
            print(f"{j},{eps!r}")
    else:
        if not args.epsilon > 0:
            raise UsageError("--epsilon must be positive")
        print("iteration,sigma_g")
        for j in range(1, args.i + 1):
            print(f"{j},{privacy.sigma_for_epsilon(args.mu, args.B, j, args.epsilon)!r}")
    return EXIT_OK


# ------------------------------------------------------------- diagnostics

def cmd_diagnostics(args) -> int:
    cfg = cfgmod.load(args.config)
    seed = cfg.seeds[0]
    run_seed = _rng.derive_seed(seed, _rng.SWEEP, 0)
    data = build_dataset(cfg, run_seed)
    loss = build_loss(cfg, data)
    A = graph.build_metropolis(build_topology(cfg))
    try:
        w_o = build_oracle(cfg, data, loss, args.oracle)
    except tasks.OptimumError as exc:
        raise UsageError(f"optimum oracle failed: {exc}; try --oracle numeric with rho > 0") from None
    if w_o is None:
        raise UsageError("no optimum oracle for this task; pass --oracle numeric "
                         "(or set task.oracle = \"numeric\") with rho > 0")
    train = build_train_config(cfg, privacy.NONE, run_seed)
    schedule = engine.Schedule.draw(train, data)
    B = diagnostics.measure_gradient_bound(train, A, data, loss)
    consts = diagnostics.compute_constants(data, loss, w_o, tasks.agent_optima(data, loss),
                                           schedule.epochs, train.L, B)
    out = resolve_output(cfg, args.output)
    text = consts.format()
    write_atomic(out / "constants.txt", text)
    print(text, end="")
    if not args.sensitivity:
        return EXIT_OK
    p, k = args.agent
    if not (0 <= p < data.P and 0 <= k < data.K):
        raise UsageError(f"--agent {p} {k} is outside the {data.P}x{data.K} grid")
    data_prime = data.replace_shard(p, k, tasks.neighbouring_shard(data, p, k, run_seed))
    trace = diagnostics.sensitivity_experiment(train, A, data, data_prime, loss)
    rows = ["iteration,delta,bound"] + [f"{i},{d!r},{b!r}" for i, d, b in trace.rows()]
    write_atomic(out / "sensitivity.csv", "\n".join(rows) + "\n")
    if trace.holds:
        print(f"sensitivity bound holds for all {len(trace.deltas)} iterations (B = {trace.B!r})")
        return EXIT_OK
    print(f"sensitivity bound violated at iterations {trace.violations[:10]}")
    return EXIT_RUNTIME


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="privgfl", description="Privatized graph federated learning")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train every sweep point, scheme and seed; write metrics CSVs")
    r.add_argument("config")
    r.add_argument("--output", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    r.add_argument("--jobs", type=int, default=1, help="parallel processes across runs")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate-graph", help="check the combination matrix of a config")
    v.add_argument("config")
    v.add_argument("--tol", type=float, default=1e-12)
    v.set_defaults(func=cmd_validate_graph)

    a = sub.add_parser("account", help="privacy budget schedule")
    a.add_argument("--mu", type=float, required=True)
    a.add_argument("--B", type=float, required=True)
    a.add_argument("--i", type=int, required=True, help="horizon")
    grp = a.add_mutually_exclusive_group(required=True)
    grp.add_argument("--sigma-g", type=float, dest="sigma_g")
    grp.add_argument("--epsilon", type=float)
    a.set_defaults(func=cmd_account)

    d = sub.add_parser("diagnostics", help="analysis constants and the sensitivity check")
    d.add_argument("config")
    d.add_argument("--sensitivity", action="store_true")
    d.add_argument("--agent", type=int, nargs=2, default=(0, 0), metavar=("P", "K"),
                   help="agent whose shard is replaced in the sensitivity run")
    d.add_argument("--oracle", choices=[o for o in cfgmod.ORACLES if o != "auto"])
    d.add_argument("--output")
    d.set_defaults(func=cmd_diagnostics)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (cfgmod.ConfigError, UsageError, privacy.PrivacyConfigError,
            engine.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (tasks.DatasetError, tasks.OptimumError, graph.GraphError,
            diagnostics.DiagnosticsError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
