"""Command-line entry point: variance profiles, simulation, fitting, experiments.

Exit codes: 0 success, 2 input error, 3 convergence warning (outputs are
still written), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .car import Kind, build_homcar, build_icar, build_stern_cressie, constraint_vector
from .graph import (
    AdjacencyGraph,
    GraphError,
    centroid_distances,
    distance_quantile,
    graph_summary,
    lattice_graph,
    parse_lattice_spec,
    read_graph,
)
from .inference import BymModelSpec, McmcConfig, fit_bym
from .metrics import (
    MetricsReport,
    bin_relative_differences,
    dic,
    empirical_variance_map,
    interval_score,
    mab,
    mean_variance,
    pearson_correlation,
    relative_variance_difference,
    rmse,
    variance_mse,
    waic,
)
from .sampling import SimulationScenario, derive_seed, gaussian_field_factor, generate_replicate
from .spectral import VarianceProfile, constrained_covariance, marginal_variances

log = logging.getLogger("homcar")

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "experiment.name": "experiment",
    "graph.edges": None,
    "graph.nodes": None,
    "graph.lattice": None,
    "scenario.delta": None,
    "scenario.delta_quantile": 0.25,
    "scenario.marginal_sd": 0.2,
    "scenario.baseline_expected": 5.0,
    "scenario.replicates": 100,
    "scenario.base_seed": 20240601,
    "models": ["icar", "homcar"],
    "prior.tau_u": [1.0, 5e-5],
    "prior.tau_v": [1.0, 5e-5],
    "mcmc.chains": 4,
    "mcmc.burn_in": 5000,
    "mcmc.samples_per_chain": 5000,
    "mcmc.thinning": 5,
    "mcmc.seed": 1,
    "mcmc.adaptation_target": 0.44,
    "metrics.alpha": 0.05,
    "run.jobs": 1,
    "run.replicates": None,
    "output.dir": "out",
}
PATH_KEYS = ("graph.edges", "graph.nodes", "output.dir")


# ----------------------------------------------------------------- helpers


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def manifest(command: str, parameters: dict, inputs: dict[str, str | None], **extra) -> dict:
    hashes = {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in inputs.items() if p}
    return {"command": command, "version": __version__, "parameters": parameters,
            "inputs": hashes, **extra}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: dict) -> dict:
    """Defaults, then the JSON config file, then overrides (flags win)."""
    cfg = dict(DEFAULTS)
    if path:
        p = Path(path)
        try:
            data = json.loads(p.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object with dotted keys")
        for key, value in data.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            # relative paths are resolved against the config file
            if key in PATH_KEYS and value is not None and not Path(value).is_absolute():
                value = str(p.parent / value)
            cfg[key] = value
    for key, value in overrides.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            cfg[key] = value
    return cfg


def _set_overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def load_graph(edges=None, nodes=None, lattice=None) -> AdjacencyGraph:
    if lattice and edges:
        raise ConfigError("give either a lattice or a graph file, not both")
    if lattice:
        return lattice_graph(*parse_lattice_spec(lattice))
    if not edges:
        raise ConfigError("a graph (--graph) or a lattice (--lattice RxC) is required")
    try:
        return read_graph(edges, nodes)
    except FileNotFoundError as exc:
        raise ConfigError(f"graph file not found: {exc.filename}") from exc


def build_structure(g: AdjacencyGraph, kind: str, phi: float = 1.0):
    kind = Kind(kind)
    if kind is Kind.ICAR:
        return build_icar(g)
    if kind is Kind.HOMCAR:
        return build_homcar(g)
    return build_stern_cressie(g, phi=phi)


def read_counts(path, g: AdjacencyGraph, expected: float | None):
    """Counts file with columns ``unit_id,count`` and optionally ``expected``.

    Rows may come in any order; they are matched to the graph by identifier.
    Expected counts come from the file, else the graph node file, else the
    ``expected`` constant.
    """
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"counts file not found: {path}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or not {"unit_id", "count"} <= set(reader.fieldnames):
        raise ConfigError("counts file needs a header with unit_id and count columns")
    counts, exp = {}, {}
    for row in reader:
        uid = row["unit_id"].strip()
        if uid in counts:
            raise ConfigError(f"duplicate unit {uid!r} in counts file")
        try:
            value = float(row["count"])
        except ValueError as exc:
            raise ConfigError(f"bad count for unit {uid!r}") from exc
        if value < 0 or value != round(value):
            raise ConfigError(f"count for unit {uid!r} must be a non-negative integer")
        counts[uid] = value
        if row.get("expected") not in (None, ""):
            exp[uid] = float(row["expected"])
    if set(counts) != set(g.unit_ids):
        missing = sorted(set(g.unit_ids) - set(counts))[:5]
        extra = sorted(set(counts) - set(g.unit_ids))[:5]
        raise ConfigError(f"counts do not match the graph (missing {missing}, unknown {extra})")
    O = np.array([counts[u] for u in g.unit_ids])
    if exp:
        if set(exp) != set(counts):
            raise ConfigError("expected column must be filled for every unit")
        E = np.array([exp[u] for u in g.unit_ids])
    elif g.expected is not None:
        E = np.asarray(g.expected, dtype=float)
    elif expected is not None:
        E = np.full(g.size, float(expected))
    else:
        raise ConfigError("no expected counts: add an expected column or pass --expected")
    if np.any(E <= 0):
        raise ConfigError("expected counts must be positive")
    return O, E


def read_table(path) -> dict[str, np.ndarray | list]:
    """Column-wise view of a CSV written by this package (``#`` lines skipped)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    rows = list(reader)
    out = {}
    for name in reader.fieldnames:
        values = [r[name] for r in rows]
        try:
            out[name] = np.array([float(v) for v in values])
        except ValueError:
            out[name] = values
    return out


def mcmc_config(cfg: dict) -> McmcConfig:
    return McmcConfig(
        chains=int(cfg["mcmc.chains"]), burn_in=int(cfg["mcmc.burn_in"]),
        samples_per_chain=int(cfg["mcmc.samples_per_chain"]), thinning=int(cfg["mcmc.thinning"]),
        seed=int(cfg["mcmc.seed"]), adaptation_target=float(cfg["mcmc.adaptation_target"]),
    )


def write_fit(out: Path, fit, with_draws: bool = False) -> dict:
    """Write the summary, hyperparameter and convergence files of one fit."""
    write_text(out / "eta_summary.csv", fit.eta_table())
    write_text(out / "hyperparameters.csv", fit.hyper_table())
    report = {
        "converged": fit.converged,
        "rhat": fit.rhat,
        "max_rhat": max(fit.rhat.values()),
        "acceptance": fit.acceptance,
        "max_constraint_residual": fit.max_constraint_residual,
    }
    write_json(out / "convergence.json", report)
    write_json(out / "criteria.json", {"dic": dic(fit), "waic": waic(fit)})
    if with_draws:
        write_text(out / "draws.csv", fit.draws_table())
    return report


# ------------------------------------------------------- variance-profile


def cmd_variance_profile(args) -> int:
    g = load_graph(args.graph, args.nodes, args.lattice)
    out = Path(args.out)
    kinds = [args.kind]
    if args.homcar and Kind(args.kind) is not Kind.HOMCAR:
        kinds.append(Kind.HOMCAR.value)
    summaries = {}
    for kind in kinds:
        Q = build_structure(g, kind, args.phi)
        prof = marginal_variances(Q, args.tau)
        write_text(out / f"variance_{Q.kind.value}.csv", prof.to_csv())
        summaries[Q.kind.value] = prof.summary()
        if Q.kind is Kind.HOMCAR:
            # law of the effect under the sigma-weighted model constraint
            K = constrained_covariance(Q, constraint_vector(Q), args.tau)
            cprof = VarianceProfile(np.diag(K).copy(), g.unit_ids)
            write_text(out / "variance_homcar_constrained.csv", cprof.to_csv())
            summaries["homcar_constrained"] = cprof.summary()
    write_json(out / "summary.json", summaries)
    params = {"tau": args.tau, "kinds": kinds, "phi": args.phi, "lattice": args.lattice}
    write_json(out / "manifest.json",
               manifest("variance-profile", params, {"graph": args.graph, "nodes": args.nodes},
                        graph=json.loads(graph_summary(g))))
    for kind, s in summaries.items():
        print(f"{kind}: min={s['min']:.6g} median={s['median']:.6g} max={s['max']:.6g} "
              f"ratio={s['max_min_ratio']:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------- simulate


def _graph_from_config(cfg: dict) -> AdjacencyGraph:
    return load_graph(cfg["graph.edges"], cfg["graph.nodes"], cfg["graph.lattice"])


def scenario_from_config(cfg: dict, g: AdjacencyGraph) -> SimulationScenario:
    J = cfg["scenario.replicates"]
    if not isinstance(J, int) or J < 1:
        raise ConfigError("scenario.replicates must be a positive integer")
    if g.centroids is None:
        raise ConfigError("simulation needs unit centroids (x,y columns in the node file)")
    delta = cfg["scenario.delta"]
    if delta is None:
        delta = distance_quantile(centroid_distances(g), float(cfg["scenario.delta_quantile"]))
    return SimulationScenario(
        g, float(delta), marginal_sd=float(cfg["scenario.marginal_sd"]),
        baseline_expected=float(cfg["scenario.baseline_expected"]),
        replicates=J, base_seed=int(cfg["scenario.base_seed"]),
    )


def _replicate_indices(cfg: dict, J: int) -> list[int]:
    sel = cfg["run.replicates"]
    if sel is None:
        return list(range(J))
    sel = [sel] if isinstance(sel, int) else list(sel)
    if any(not isinstance(r, int) or not 0 <= r < J for r in sel):
        raise ConfigError(f"run.replicates must be indices in [0, {J})")
    return sorted(set(sel))


def write_scenario(out: Path, cfg: dict, s: SimulationScenario, reps: list[int], inputs: dict):
    L = gaussian_field_factor(s.covariance())
    for r in reps:
        data = generate_replicate(s, r, L)
        write_text(out / f"rep_{r:04d}.csv", data.to_csv(s.graph.unit_ids))
    params = {k: v for k, v in cfg.items() if k.startswith(("scenario.", "graph.", "run."))}
    doc = manifest("simulate", params, inputs, delta=s.delta,
                   seeds={str(r): derive_seed(s.base_seed, r) for r in range(s.replicates)})
    write_json(out / "scenario.json", doc)


def _config_overrides(args, mapping: dict[str, str]) -> dict:
    over = {key: getattr(args, attr, None) for key, attr in mapping.items()}
    over.update(_set_overrides(getattr(args, "set", None)))
    return over


SCENARIO_FLAGS = {
    "graph.edges": "graph", "graph.nodes": "nodes", "graph.lattice": "lattice",
    "scenario.delta": "delta", "scenario.delta_quantile": "delta_quantile",
    "scenario.marginal_sd": "marginal_sd", "scenario.baseline_expected": "expected",
    "scenario.replicates": "replicates", "scenario.base_seed": "base_seed",
    "output.dir": "out", "run.replicates": "replicate",
}


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, _config_overrides(args, SCENARIO_FLAGS))
    g = _graph_from_config(cfg)
    s = scenario_from_config(cfg, g)
    reps = _replicate_indices(cfg, s.replicates)
    inputs = {"config": args.config, "graph": cfg["graph.edges"], "nodes": cfg["graph.nodes"]}
    write_scenario(Path(cfg["output.dir"]), cfg, s, reps, inputs)
    print(f"wrote {len(reps)} replicates (delta={s.delta:.6g}) to {cfg['output.dir']}")
    return EXIT_OK


# --------------------------------------------------------------------- fit


def cmd_fit(args) -> int:
    g = load_graph(args.graph, args.nodes, args.lattice)
    O, E = read_counts(args.counts, g, args.expected)
    if Kind(args.model) not in (Kind.ICAR, Kind.HOMCAR):
        raise ConfigError("the spatial model must be icar or homcar")
    model = BymModelSpec(build_structure(g, args.model), tuple(args.prior_tau_u), tuple(args.prior_tau_v))
    cfg = McmcConfig(chains=args.chains, burn_in=args.burn_in, samples_per_chain=args.samples,
                     thinning=args.thinning, seed=args.seed)
    fit = fit_bym(O, E, model, cfg)
    out = Path(args.out)
    report = write_fit(out, fit, args.draws)
    params = {"model": args.model, "prior_tau_u": list(args.prior_tau_u),
              "prior_tau_v": list(args.prior_tau_v), "mcmc": cfg.__dict__, "lattice": args.lattice}
    write_json(out / "manifest.json", manifest(
        "fit", params, {"counts": args.counts, "graph": args.graph, "nodes": args.nodes}))
    if not report["converged"]:
        print(f"warning: not converged (max rhat {report['max_rhat']:.3f})", file=sys.stderr)
        return EXIT_CONVERGENCE
    print(f"converged (max rhat {report['max_rhat']:.3f}); outputs in {out}")
    return EXIT_OK


# -------------------------------------------------------------- experiment


@dataclass(frozen=True)
class _Job:
    replicate: int
    label: str
    kind: str
    out: str
    data_file: str
    prior_u: tuple[float, float]
    prior_v: tuple[float, float]
    mcmc: McmcConfig


# per-process worker state, set by the pool initializer
_GRAPH: AdjacencyGraph | None = None
_EXPECTED: np.ndarray | None = None
_MODELS: dict = {}


def _init_worker(g: AdjacencyGraph, expected: np.ndarray) -> None:
    global _GRAPH, _EXPECTED, _MODELS
    _GRAPH, _EXPECTED, _MODELS = g, expected, {}


def _run_job(job: _Job) -> dict:
    key = (job.kind, job.prior_u, job.prior_v)
    if key not in _MODELS:
        _MODELS[key] = BymModelSpec(build_structure(_GRAPH, job.kind), job.prior_u, job.prior_v)
    O = read_table(job.data_file)["count"]
    result = {"replicate": job.replicate, "model": job.label}
    try:
        fit = fit_bym(O, _EXPECTED, _MODELS[key], job.mcmc)
        report = write_fit(Path(job.out), fit)
        result.update(status="ok", converged=report["converged"], max_rhat=report["max_rhat"])
    except (ArithmeticError, FloatingPointError, ValueError) as exc:
        log.error("replicate %d, model %s failed: %s", job.replicate, job.label, exc)
        result.update(status=f"failed: {exc}", converged=False, max_rhat=float("nan"))
    return result


EXPERIMENT_FLAGS = dict(SCENARIO_FLAGS, **{
    "experiment.name": "name", "run.jobs": "jobs", "mcmc.seed": "seed",
    "mcmc.chains": "chains", "mcmc.burn_in": "burn_in",
    "mcmc.samples_per_chain": "samples", "mcmc.thinning": "thinning",
})


def model_labels(models) -> list[tuple[str, str]]:
    """``[(label, kind)]``; entries are ``kind`` or ``label=kind``."""
    out, seen = [], set()
    if isinstance(models, str):
        models = [m for m in models.split(",") if m]
    for entry in models:
        label, _, kind = entry.partition("=") if "=" in entry else (entry, "", entry)
        try:
            if Kind(kind) not in (Kind.ICAR, Kind.HOMCAR):
                raise ValueError
        except ValueError as exc:
            raise ConfigError(f"unknown model {kind!r}; use icar or homcar") from exc
        base, k = label, 2
        while label in seen:
            label, k = f"{base}_{k}", k + 1
        seen.add(label)
        out.append((label, kind))
    if not out:
        raise ConfigError("at least one model is required")
    return out


def cmd_experiment(args) -> int:
    over = _config_overrides(args, EXPERIMENT_FLAGS)
    if args.models:
        over["models"] = args.models
    cfg = load_config(args.config, over)
    g = _graph_from_config(cfg)
    s = scenario_from_config(cfg, g)
    if s.replicates < 2:
        raise ConfigError("an experiment needs at least two replicates")
    reps = _replicate_indices(cfg, s.replicates)
    models = model_labels(cfg["models"])
    jobs = int(cfg["run.jobs"])
    if jobs < 1:
        raise ConfigError("run.jobs must be at least 1")
    root = Path(cfg["output.dir"]) / cfg["experiment.name"]
    inputs = {"config": args.config, "graph": cfg["graph.edges"], "nodes": cfg["graph.nodes"]}
    write_scenario(root / "data", cfg, s, reps, inputs)

    prior_u, prior_v = tuple(map(float, cfg["prior.tau_u"])), tuple(map(float, cfg["prior.tau_v"]))
    base_mcmc = mcmc_config(cfg)
    job_list = []
    for r in reps:
        # the chain seed depends on the replicate only, never on model order
        mc = McmcConfig(**{**base_mcmc.__dict__, "seed": derive_seed(base_mcmc.seed, r)})
        for label, kind in models:
            job_list.append(_Job(r, label, kind, str(root / label / f"{r:04d}"),
                                 str(root / "data" / f"rep_{r:04d}.csv"), prior_u, prior_v, mc))

    expected = s.expected()
    if jobs == 1:
        _init_worker(g, expected)
        results = [_run_job(j) for j in job_list]
    else:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(g, expected)) as ex:
            results = list(ex.map(_run_job, job_list))

    params = {k: v for k, v in cfg.items()}
    write_json(root / "manifest.json", manifest(
        "experiment", params, inputs, delta=s.delta,
        mcmc_seeds={str(r): derive_seed(base_mcmc.seed, r) for r in reps}))
    status = aggregate_experiment(root, models=[m for m, _ in models], alpha=float(cfg["metrics.alpha"]),
                                  target=float(cfg["scenario.marginal_sd"]) ** 2)
    failed = [r for r in results if r["status"] != "ok"]
    unconverged = [r for r in results if r["status"] == "ok" and not r["converged"]]
    print(f"{len(results)} fits: {len(failed)} failed, {len(unconverged)} flagged; "
          f"complete={status['complete']}; outputs in {root}")
    if failed:
        return EXIT_NUMERICAL
    return EXIT_CONVERGENCE if unconverged else EXIT_OK


def _collect(root: Path, label: str, replicates: list[int]):
    maps, lo, hi, truth, crit, flags = [], [], [], [], [], []
    for r in replicates:
        d = root / label / f"{r:04d}"
        if not (d / "eta_summary.csv").exists():
            continue
        tab = read_table(d / "eta_summary.csv")
        data = read_table(root / "data" / f"rep_{r:04d}.csv")
        maps.append(tab["eta_mean"])
        lo.append(tab["eta_q025"])
        hi.append(tab["eta_q975"])
        truth.append(data["theta_true"])
        crit.append(json.loads((d / "criteria.json").read_text()))
        flags.append(json.loads((d / "convergence.json").read_text())["converged"])
    return maps, lo, hi, truth, crit, flags


def aggregate_experiment(root: Path, models: list[str] | None = None, alpha: float = 0.05,
                         target: float | None = None) -> dict:
    """Assemble figure and table data from per-replicate outputs on disk."""
    root = Path(root)
    scen = json.loads((root / "data" / "scenario.json").read_text())
    exp_manifest = json.loads((root / "manifest.json").read_text())
    params = exp_manifest["parameters"]
    if models is None:
        models = [m for m, _ in model_labels(params["models"])]
    kinds = dict(model_labels(params["models"]))
    if target is None:
        target = float(params["scenario.marginal_sd"]) ** 2
    J = int(params["scenario.replicates"])
    g = load_graph(params["graph.edges"], params["graph.nodes"], params["graph.lattice"])
    prior_icar = marginal_variances(build_icar(g)).variances
    prior_hom = marginal_variances(build_homcar(g)).variances
    region = params["experiment.name"]

    summary_rows = ["replicate,model,status,converged,dic,waic"]
    variance, rows, correlations, complete = {}, [], {}, True
    for label in models:
        maps, lo, hi, truth, crit, flags = _collect(root, label, list(range(J)))
        done = set()
        for r in range(J):
            d = root / label / f"{r:04d}"
            if (d / "criteria.json").exists():
                c = json.loads((d / "criteria.json").read_text())
                conv = json.loads((d / "convergence.json").read_text())["converged"]
                summary_rows.append(f"{r},{label},ok,{conv},{c['dic']!r},{c['waic']!r}")
                done.add(r)
            else:
                summary_rows.append(f"{r},{label},missing,,,")
        complete &= len(done) == J
        if len(maps) < 2:
            continue
        M, T = np.array(maps), np.array(truth)
        var = empirical_variance_map(M)
        variance[label] = var
        own_prior = prior_hom if kinds[label] == Kind.HOMCAR.value else prior_icar
        try:
            own = pearson_correlation(own_prior, var)
        except ValueError:
            own = float("nan")
        corr = pearson_correlation(prior_icar, var)
        correlations[label] = {"icar_prior": corr, "own_prior": own, "replicates": len(maps)}
        IS = interval_score(np.array(lo), np.array(hi), T, alpha)
        dics = np.array([c["dic"] for c in crit])
        waics = np.array([c["waic"] for c in crit])
        for agg, fn in (("sum", np.sum), ("mean", np.mean)):
            rows.append(MetricsReport(
                region, label, agg, float(fn(dics)), float(fn(waics)),
                mab(M.T, T.T), rmse(M, T), float(np.mean(IS)),
                variance_mse(var, target), mean_variance(var), corr,
            ))

    write_text(root / "summary.csv", "\n".join(summary_rows) + "\n")
    table = [MetricsReport.csv_header()] + [r.csv_row() for r in sorted(rows, key=lambda r: r.aggregation != "sum")]
    write_text(root / "metrics_table.csv", "\n".join(table) + "\n")
    write_json(root / "correlations.json", correlations)

    buf = io.StringIO()
    head = ["unit_id", "x", "y", "icar_prior_variance", "homcar_prior_variance"]
    head += [f"{m}_empirical_variance" for m in variance]
    icar_labels = [m for m in variance if kinds[m] == Kind.ICAR.value]
    hom_labels = [m for m in variance if kinds[m] == Kind.HOMCAR.value]
    rel = None
    if icar_labels and hom_labels:
        rel = relative_variance_difference(variance[hom_labels[0]], variance[icar_labels[0]])
        head += ["relative_difference", "relative_band"]
        bands = bin_relative_differences(rel)
    buf.write(",".join(head) + "\n")
    cent = g.centroids if g.centroids is not None else np.full((g.size, 2), np.nan)
    for i, uid in enumerate(g.unit_ids):
        vals = [uid, repr(float(cent[i, 0])), repr(float(cent[i, 1])),
                repr(float(prior_icar[i])), repr(float(prior_hom[i]))]
        vals += [repr(float(variance[m][i])) for m in variance]
        if rel is not None:
            vals += [repr(float(rel[i])), bands[i]]
        buf.write(",".join(vals) + "\n")
    write_text(root / "variance_maps.csv", buf.getvalue())

    if variance:
        edges = np.histogram_bin_edges(np.concatenate(list(variance.values())), bins=20)
        hist = ["model,bin_lower,bin_upper,count"]
        for m, var in variance.items():
            counts, _ = np.histogram(var, edges)
            hist += [f"{m},{float(edges[k])!r},{float(edges[k + 1])!r},{int(c)}" for k, c in enumerate(counts)]
        write_text(root / "variance_histogram.csv", "\n".join(hist) + "\n")
    status = {"complete": complete, "replicates": J, "models": models, "delta": scen["delta"]}
    write_json(root / "status.json", status)
    return status


# ----------------------------------------------------------------- metrics


def cmd_metrics(args) -> int:
    if args.experiment:
        status = aggregate_experiment(Path(args.experiment), alpha=args.alpha)
        print((Path(args.experiment) / "metrics_table.csv").read_text(), end="")
        return EXIT_OK if status["complete"] else EXIT_CONVERGENCE
    if not (args.fit and args.truth):
        raise ConfigError("give --experiment DIR, or --fit DIR together with --truth FILE")
    fit_dir = Path(args.fit)
    try:
        tab = read_table(fit_dir / "eta_summary.csv")
        crit = json.loads((fit_dir / "criteria.json").read_text())
        truth_tab = read_table(args.truth)
    except FileNotFoundError as exc:
        raise ConfigError(f"missing file: {exc.filename}") from exc
    if list(tab["unit_id"]) != list(truth_tab["unit_id"]):
        raise ConfigError("fit and truth files list different units")
    est, truth = tab["eta_mean"], truth_tab["theta_true"]
    IS = interval_score(tab["eta_q025"], tab["eta_q975"], truth, args.alpha)
    report = MetricsReport(args.region, args.model or fit_dir.name, "single", crit["dic"], crit["waic"],
                           mab(est, truth), rmse(est, truth), float(np.mean(IS)),
                           float("nan"), float("nan"), float("nan"))
    text = report.to_text()
    if args.out:
        write_text(Path(args.out), text)
    print(text, end="")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _graph_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--graph", help="edge file (id_a,id_b[,weight])")
    p.add_argument("--nodes", help="node file (id[,x,y][,expected])")
    p.add_argument("--lattice", help="built-in rook lattice, e.g. 15x15")


def _mcmc_args(p: argparse.ArgumentParser, defaults: bool) -> None:
    d = McmcConfig()
    p.add_argument("--chains", type=int, default=d.chains if defaults else None)
    p.add_argument("--burn-in", type=int, default=d.burn_in if defaults else None)
    p.add_argument("--samples", type=int, default=d.samples_per_chain if defaults else None,
                   help="sweeps per chain after burn-in")
    p.add_argument("--thinning", type=int, default=d.thinning if defaults else None)
    p.add_argument("--seed", type=int, default=d.seed if defaults else None)


def _scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config with dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--delta", type=float, help="correlation range (overrides the quantile rule)")
    p.add_argument("--delta-quantile", type=float)
    p.add_argument("--marginal-sd", type=float)
    p.add_argument("--expected", type=float, help="constant expected count per unit")
    p.add_argument("--replicates", type=int)
    p.add_argument("--base-seed", type=int)
    p.add_argument("--replicate", type=int, action="append",
                   help="only (re)generate this replicate index; repeatable")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="homcar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("variance-profile", help="marginal variances of a structure matrix")
    _graph_args(p)
    p.add_argument("--kind", default="icar", choices=[k.value for k in Kind])
    p.add_argument("--homcar", action="store_true", help="also profile the HomCAR matrix")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--phi", type=float, default=1.0, help="Stern-Cressie dependence parameter")
    p.add_argument("--out", default="variance_profile")
    p.set_defaults(func=cmd_variance_profile)

    p = sub.add_parser("simulate", help="Gaussian-field truths and Poisson counts")
    _graph_args(p)
    _scenario_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a BYM or HomCAR-BYM model by MCMC")
    _graph_args(p)
    p.add_argument("--counts", required=True, help="CSV with unit_id,count[,expected]")
    p.add_argument("--expected", type=float, help="constant expected count if not in the files")
    p.add_argument("--model", default="icar", choices=["icar", "homcar"])
    p.add_argument("--prior-tau-u", type=float, nargs=2, default=(1.0, 5e-5), metavar=("SHAPE", "RATE"))
    p.add_argument("--prior-tau-v", type=float, nargs=2, default=(1.0, 5e-5), metavar=("SHAPE", "RATE"))
    _mcmc_args(p, defaults=True)
    p.add_argument("--draws", action="store_true", help="also write draws.csv")
    p.add_argument("--out", default="fit")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("experiment", help="simulate, fit every model, and summarise")
    _graph_args(p)
    _scenario_args(p)
    _mcmc_args(p, defaults=False)
    p.add_argument("--name", help="experiment name (output subdirectory)")
    p.add_argument("--models", help="comma-separated models, e.g. icar,homcar")
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("metrics", help="recompute metric tables")
    p.add_argument("--experiment", help="experiment directory to re-aggregate")
    p.add_argument("--fit", help="fit output directory")
    p.add_argument("--truth", help="replicate CSV with a theta_true column")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--region", default="user")
    p.add_argument("--model", help="model label for the report (default: fit directory name)")
    p.add_argument("--out", help="write the key=value report here")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (np.linalg.LinAlgError, ArithmeticError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, GraphError, ValueError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
