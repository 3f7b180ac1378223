"""Command-line pipeline: simulate -> graph -> form -> evaluate -> resilience -> report.

Every stage reads the artifacts of the stages before it from the output
directory and writes its own. All randomness derives from one master seed,
so a fixed configuration reproduces every file byte for byte.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import zlib
from dataclasses import fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .corrgraph import (
    DECORRELATION_D2,
    CorrelationMatrix,
    correlation_matrix,
    epsilon_filter,
    epsilon_star,
    to_distance_graph,
    write_edges_csv,
    write_matrix_csv,
)
from .errors import CoalitionError, ConfigurationError, DataError, DegenerateParametersError, StageDependencyError
from .formation import (
    CORRELATED,
    GREEDY,
    RANDOM,
    FormationParams,
    correlated_formation,
    greedy_formation,
    random_structure,
)
from .market import EMPIRICAL, GridPolicy, TraceStore, alpha_star, evaluate_aggregate, mean_field_params
from .powermodel import ConfigRanges, ProductionTrace, ProsumerConfig, random_configs, simulate_traces
from .resilience import resilience_sweeps, write_summary_csv, write_sweep_csv
from .weather import (
    SynthParams,
    format_timestamp,
    ingest_weather_csv,
    parse_timestamp,
    random_zone_specs,
    synthesize_weather,
)

log = logging.getLogger("prosumer_coalitions")

STAGES = ("simulate", "graph", "form", "evaluate", "resilience", "report")
ALGORITHMS = (GREEDY, RANDOM, CORRELATED)

TRACES = "traces.csv"
CORRELATION = "correlation.csv"
EDGES = "edges_decorrelation.csv"
GRAPH = "graph.json"
ITERATIONS = "iteration_log.csv"
SUMMARY = "summary.json"
INCOMPLETE = "INCOMPLETE"

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "out",
    "weather": {
        "source": "synthetic",
        "n_zones": 15,
        "start": "2006-01-01T00:00:00Z",
        "n_steps": 20440,
        "period_hours": 3,
        "params": {},
    },
    "population": {"n_agents": 100, "ramp": "cubic", "ranges": {}},
    "policy": {"p_min": 10000.0, "phi": 0.3, "p_max": 1e6, "lambda_rate": 1.0, "alpha": 0.5, "mode": EMPIRICAL},
    "formation": {"n_coal": 5, "k": 3, "loop_max": 1000, "beta": 0.02},
    "resilience": {
        "psi_grid": [round(0.1 * i, 1) for i in range(10)],
        "replicates": 100,
        "failure_mode": "disconnect",
    },
}


def structure_file(algo: str) -> str:
    return f"structure_{algo}.json"


def evaluation_file(algo: str) -> str:
    return f"evaluation_{algo}.json"


def sweep_files(level: float, base: float) -> tuple[str, str]:
    suffix = "" if level == base else f"_pmin{level:g}"
    return f"resilience_sweep{suffix}.csv", f"resilience_summary{suffix}.csv"


# ---------------------------------------------------------------------------
# Configuration


def load_schema(name: str) -> dict:
    return json.loads(resources.files(__package__).joinpath("schemas", name).read_text(encoding="utf-8"))


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "weather":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, load_schema("run_config.schema.json"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"config {where}: {exc.message}") from None


def load_config(path=None, seed=None, out=None) -> dict:
    """Defaults, overlaid with the JSON file, overlaid with CLI flags.

    Relative paths inside the file are resolved against the file's folder.
    """
    user: dict = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigurationError("config root must be an object")
        validate_config(user)
        base_dir = path.resolve().parent
    cfg = _merge(DEFAULT_CONFIG, user)
    if "weather" in user:
        defaults = DEFAULT_CONFIG["weather"] if user["weather"].get("source") == "synthetic" else {}
        cfg["weather"] = _merge(defaults, user["weather"])
    if "output_dir" in user and not Path(user["output_dir"]).is_absolute():
        cfg["output_dir"] = os.path.normpath(base_dir / user["output_dir"])
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["output_dir"] = str(out)
    validate_config(cfg)
    if "p_min_levels" not in cfg["resilience"]:
        p = float(cfg["policy"]["p_min"])
        cfg["resilience"]["p_min_levels"] = [p, 4.0 * p]
    for section, key in (("weather", "path"), ("population", "agents_path")):
        value = cfg[section].get(key)
        if value is not None and not Path(value).is_absolute():
            cfg[section]["_resolved_" + key] = str(base_dir / value)
    return cfg


def config_echo(cfg: dict) -> dict:
    """Configuration as embedded in artifacts: no machine-specific paths."""
    return {k: v for k, v in _strip_private(cfg).items() if k != "output_dir"}


def _strip_private(obj):
    if isinstance(obj, dict):
        return {k: _strip_private(v) for k, v in obj.items() if not k.startswith("_")}
    if isinstance(obj, list):
        return [_strip_private(v) for v in obj]
    return obj


def derive_seed(master: int, stream: str) -> int:
    """Independent per-stream seed; stable across platforms and versions."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(stream.encode())])
    return int(ss.generate_state(1, np.uint32)[0])


def _resolved(cfg, section, key):
    return cfg[section].get("_resolved_" + key, cfg[section].get(key))


# ---------------------------------------------------------------------------
# Artifact IO


def _meta(cfg: dict, stage: str) -> dict:
    return {"version": __version__, "seed": cfg["seed"], "stage": stage, "config": config_echo(cfg)}


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def write_json(path: Path, payload: dict) -> None:
    def w(p):
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)
            fh.write("\n")
    _atomic_write(path, w)


def read_json(path: Path) -> dict:
    if not path.exists():
        raise StageDependencyError(str(path))
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def write_traces_csv(traces, timestamps, path: Path) -> None:
    stamps = [format_timestamp(t) for t in timestamps]

    def w(p):
        with open(p, "w", encoding="utf-8", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["agent_id", "timestamp", "net_power_w"])
            for tr in traces:
                out.writerows(zip([tr.agent_id] * len(stamps), stamps, map(repr, tr.values.tolist())))
    _atomic_write(path, w)


def read_traces_csv(path: Path) -> tuple[list[ProductionTrace], np.ndarray]:
    if not path.exists():
        raise StageDependencyError(str(path))
    order: list[str] = []
    stamps: dict[str, list[str]] = {}
    values: dict[str, list[float]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["agent_id", "timestamp", "net_power_w"]:
            raise DataError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"{path} line {lineno}: expected 3 fields")
            aid, ts, v = row
            if aid not in values:
                order.append(aid)
                stamps[aid], values[aid] = [], []
            try:
                values[aid].append(float(v))
            except ValueError:
                raise DataError(f"{path} line {lineno}: bad power value {v!r}") from None
            stamps[aid].append(ts)
    if not order:
        raise DataError(f"{path}: no traces")
    ref = stamps[order[0]]
    for aid in order[1:]:
        if stamps[aid] != ref:
            raise DataError(f"{path}: agent {aid!r} is not on the common time axis")
    try:
        axis = np.array([np.datetime64(parse_timestamp(t).replace(tzinfo=None), "s") for t in ref])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return [ProductionTrace(a, np.array(values[a])) for a in order], axis


def read_correlation_csv(path: Path, agent_ids) -> CorrelationMatrix:
    if not path.exists():
        raise StageDependencyError(str(path))
    index = {a: i for i, a in enumerate(agent_ids)}
    m = np.eye(len(agent_ids))
    seen = 0
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["i", "j", "rho"]:
            raise DataError(f"{path}: unexpected header")
        for row in reader:
            try:
                i, j, r = index[row[0]], index[row[1]], float(row[2])
            except (KeyError, ValueError, IndexError):
                raise DataError(f"{path}: bad row {row}") from None
            m[i, j] = m[j, i] = r
            seen += 1
    n = len(agent_ids)
    if seen != n * (n - 1) // 2:
        raise DataError(f"{path}: expected {n * (n - 1) // 2} pairs, found {seen}")
    m.flags.writeable = False
    return CorrelationMatrix(m, tuple(agent_ids))


def write_iteration_log(history, path: Path) -> None:
    def w(p):
        with open(p, "w", encoding="utf-8", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["iteration", "global_utility", "n_assigned"])
            for it, u, n in history:
                out.writerow([it, repr(float(u)), n])
    _atomic_write(path, w)


# ---------------------------------------------------------------------------
# Stage helpers


def build_weather(cfg: dict):
    w = cfg["weather"]
    period_h = float(w.get("period_hours", 3))
    period = np.timedelta64(int(round(period_h * 3600)), "s")
    if w["source"] == "csv":
        coords = {k: tuple(v) for k, v in (w.get("coordinates") or {}).items()}
        path = _resolved(cfg, "weather", "path")
        if not Path(path).exists():
            raise ConfigurationError(f"weather file not found: {path}")
        return ingest_weather_csv(path, period=period, coordinates=coords, fill=w.get("fill"))
    try:
        params = SynthParams(**w.get("params", {}))
    except TypeError as exc:
        raise ConfigurationError(f"weather params: {exc}") from None
    extra = {k: tuple(w[k]) for k in ("lat_range", "lon_range") if k in w}
    specs = random_zone_specs(int(w["n_zones"]), derive_seed(cfg["seed"], "zones"), **extra)
    return synthesize_weather(specs, w["start"], int(w["n_steps"]), period,
                              seed=derive_seed(cfg["seed"], "weather"), params=params)


def build_ranges(raw: dict) -> ConfigRanges:
    known = {f.name for f in fields(ConfigRanges)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown population ranges: {sorted(unknown)}")
    conv = {}
    for key, value in raw.items():
        if key.startswith("n_"):
            if not all(float(v).is_integer() and v >= 0 for v in value) or value[0] > value[1]:
                raise ConfigurationError(f"{key} must be an ordered pair of non-negative integers")
            conv[key] = (int(value[0]), int(value[1]))
        elif isinstance(value, list):
            if value[0] > value[1]:
                raise ConfigurationError(f"range {key} is reversed")
            conv[key] = (float(value[0]), float(value[1]))
        else:
            conv[key] = float(value)
    return ConfigRanges(**conv)


def build_population(cfg: dict, zone_ids) -> list[ProsumerConfig]:
    pop = cfg["population"]
    path = _resolved(cfg, "population", "agents_path")
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"agents file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"agents file {path}: {exc}") from None
        try:
            jsonschema.validate(data, load_schema("agents.schema.json"))
        except jsonschema.ValidationError as exc:
            raise ConfigurationError(f"agents file: {exc.message}") from None
        configs = [ProsumerConfig.from_dict(d) for d in data["agents"]]
        if len({c.agent_id for c in configs}) != len(configs):
            raise ConfigurationError("agent ids must be unique")
        return configs
    return random_configs(int(pop["n_agents"]), zone_ids, derive_seed(cfg["seed"], "population"),
                          build_ranges(pop.get("ranges", {})))


def simulate(cfg: dict, keep_components: bool = False):
    dataset = build_weather(cfg)
    configs = build_population(cfg, dataset.zone_ids)
    traces = simulate_traces(dataset, configs, seed=derive_seed(cfg["seed"], "noise"),
                             ramp=cfg["population"].get("ramp", "cubic"), keep_components=keep_components)
    return dataset, traces


def resolve_policy(cfg: dict, store: TraceStore, rho=None) -> GridPolicy:
    p = cfg["policy"]
    alpha = p.get("alpha", 0.0)
    if alpha == "auto":
        n_bar = len(store) // int(cfg["formation"]["n_coal"])
        try:
            alpha = alpha_star(*mean_field_params(store, rho), max(n_bar, 1), float(p["phi"]))
        except DegenerateParametersError as exc:
            raise ConfigurationError(f"alpha 'auto' is undefined for this population: {exc}") from None
        if alpha < 0:
            raise ConfigurationError(f"alpha 'auto' gave a negative exponent ({alpha:.4g}); set alpha explicitly")
    return GridPolicy(float(p["p_min"]), float(p["phi"]), float(p.get("p_max", 1.0)), float(alpha),
                      float(p.get("lambda_rate", 1.0)))


def formation_params(cfg: dict) -> FormationParams:
    f = cfg["formation"]
    return FormationParams(int(f["n_coal"]), int(f["k"]), int(f["loop_max"]), float(f["beta"]),
                           derive_seed(cfg["seed"], "random_structures"), cfg["policy"].get("mode", EMPIRICAL))


def _structure_payload(cfg, s, policy, params) -> dict:
    payload = {
        "meta": _meta(cfg, "form"),
        "provenance": s.provenance,
        "params": params.to_dict(),
        "policy": policy.to_dict(),
        "global_utility": s.global_utility,
        "epsilon": s.epsilon,
        "warning": s.warning,
        "coalitions": [e.to_dict() for e in s.evaluations],
        "unassigned": list(s.unassigned),
    }
    if "seeds" in s.extra:
        payload["seed_cliques"] = s.extra["seeds"]
    return payload


class _Loaded:
    """Minimal stand-in for a CoalitionStructure read back from JSON."""

    def __init__(self, provenance, evaluations):
        self.provenance = provenance
        self.evaluations = evaluations


# ---------------------------------------------------------------------------
# Stages


def stage_simulate(cfg, out: Path, algos) -> None:
    dataset, traces = simulate(cfg)
    write_traces_csv(traces, dataset.timestamps, out / TRACES)


def _load_store(out: Path):
    traces, axis = read_traces_csv(out / TRACES)
    return TraceStore(traces), traces, axis


def stage_graph(cfg, out: Path, algos) -> None:
    _, traces, _ = _load_store(out)
    rho = correlation_matrix(traces)
    _atomic_write(out / CORRELATION, lambda p: write_matrix_csv(rho, p))
    f = cfg["formation"]
    g2 = to_distance_graph(rho, DECORRELATION_D2)
    eps, packing = epsilon_star(g2, int(f["k"]), int(f["n_coal"]))
    _atomic_write(out / EDGES, lambda p: write_edges_csv(epsilon_filter(g2, eps), p))
    ids = rho.agent_index
    write_json(out / GRAPH, {
        "meta": _meta(cfg, "graph"),
        "metric": DECORRELATION_D2,
        "epsilon_star": eps,
        "k": int(f["k"]),
        "n_coal": int(f["n_coal"]),
        "packing": [[ids[i] for i in c] for c in packing.cliques],
    })


def stage_form(cfg, out: Path, algos) -> None:
    store, traces, _ = _load_store(out)
    rho = read_correlation_csv(out / CORRELATION, store.agent_ids)
    read_json(out / GRAPH)
    policy = resolve_policy(cfg, store, rho.entries)
    params = formation_params(cfg)
    for algo in algos:
        if algo == GREEDY:
            s = greedy_formation(store, policy, params, rho=rho)
            write_iteration_log(s.history, out / ITERATIONS)
        elif algo == RANDOM:
            s = random_structure(store, policy, params)
        else:
            s = correlated_formation(store, policy, params, rho=rho)
        write_json(out / structure_file(algo), _structure_payload(cfg, s, policy, params))


def _load_structure(out: Path, algo: str):
    data = read_json(out / structure_file(algo))
    try:
        return data, [tuple(c["members"]) for c in data["coalitions"]]
    except (KeyError, TypeError):
        raise DataError(f"{structure_file(algo)}: malformed structure") from None


def stage_evaluate(cfg, out: Path, algos) -> None:
    store, _, _ = _load_store(out)
    for algo in algos:
        data, groups = _load_structure(out, algo)
        policy = GridPolicy(**data["policy"])
        mode = data["params"].get("mode", EMPIRICAL)
        evals = [evaluate_aggregate(g, store.coalition(g).aggregate, policy, mode) for g in groups]
        write_json(out / evaluation_file(algo), {
            "meta": _meta(cfg, "evaluate"),
            "provenance": algo,
            "policy": policy.to_dict(),
            "mode": mode,
            "global_utility": float(sum(e.utility for e in evals)),
            "coalitions": [e.to_dict() for e in evals],
        })


def stage_resilience(cfg, out: Path, algos) -> None:
    r = cfg["resilience"]
    mode = r.get("failure_mode", "disconnect")
    if mode == "production_only":
        _, traces = simulate(cfg, keep_components=True)
        store = TraceStore(traces)
    else:
        store, _, _ = _load_store(out)
    base = float(cfg["policy"]["p_min"])
    levels = [float(x) for x in r["p_min_levels"]] or [base]
    if base not in levels:
        levels = [base] + levels
    by_level = {lvl: [] for lvl in levels}
    for algo in algos:
        data, groups = _load_structure(out, algo)
        evals = [evaluate_aggregate(g, store.coalition(g).aggregate, GridPolicy(**data["policy"])) for g in groups]
        reports = resilience_sweeps(_Loaded(algo, evals), store, r["psi_grid"], int(r["replicates"]), levels,
                                    derive_seed(cfg["seed"], "resilience"), mode)
        for lvl, rep in zip(levels, reports):
            by_level[lvl].append(rep)
    for lvl, reps in by_level.items():
        sweep, summary = sweep_files(lvl, base)
        _atomic_write(out / sweep, lambda p, reps=reps: write_sweep_csv(reps, p))
        _atomic_write(out / summary, lambda p, reps=reps: write_summary_csv(reps, p))


def _read_summary_csv(path: Path) -> dict:
    table: dict = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            entry = table.setdefault(row["provenance"], {"psi": [], "mean": [], "std": []})
            for key in ("psi", "mean", "std"):
                entry[key].append(float(row[key]))
    return table


def stage_report(cfg, out: Path, algos) -> None:
    result = {"meta": _meta(cfg, "report"), "algorithms": {}, "resilience": {}}
    for algo in algos:
        ev = read_json(out / evaluation_file(algo))
        coalitions = [
            {"members": c["members"], "contract": c["p_contract"], "volatility": c["sigma"], "valid": c["valid"]}
            for c in ev["coalitions"]
        ]
        result["algorithms"][algo] = {
            "global_utility": ev["global_utility"],
            "mean_contract": float(np.mean([c["contract"] for c in coalitions])),
            "mean_volatility": float(np.mean([c["volatility"] for c in coalitions])),
            "coalitions": coalitions,
        }
    base = float(cfg["policy"]["p_min"])
    for lvl in cfg["resilience"]["p_min_levels"]:
        path = out / sweep_files(float(lvl), base)[1]
        if path.exists():
            result["resilience"][f"{float(lvl):g}"] = _read_summary_csv(path)
    write_json(out / SUMMARY, result)


STAGE_FUNCS = {
    "simulate": stage_simulate,
    "graph": stage_graph,
    "form": stage_form,
    "evaluate": stage_evaluate,
    "resilience": stage_resilience,
    "report": stage_report,
}


def _present(out: Path, algos, name, requested: bool):
    """Algorithms whose upstream file exists; an explicit request must be complete."""
    if requested:
        for a in algos:
            if not (out / name(a)).exists():
                raise StageDependencyError(str(out / name(a)))
        return list(algos)
    have = [a for a in algos if (out / name(a)).exists()]
    if not have:
        raise StageDependencyError(str(out / name(algos[0])))
    return have


def run_stages(cfg: dict, stages, algos=ALGORITHMS, algos_requested: bool = False) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE
    for stage in stages:
        try:
            chosen = list(algos)
            if stage in ("evaluate", "resilience"):
                chosen = _present(out, algos, structure_file, algos_requested)
            elif stage == "report":
                chosen = _present(out, algos, evaluation_file, algos_requested)
            log.info("stage %s", stage)
            STAGE_FUNCS[stage](cfg, out, chosen)
        except BaseException as exc:
            marker.write_text(f"stage {stage} failed: {exc}\n", encoding="utf-8")
            for tmp in out.glob("*.tmp"):
                tmp.unlink()
            raise
    if marker.exists():
        marker.unlink()
    return out


# ---------------------------------------------------------------------------
# Entry point


def _parse_algos(text: str) -> list[str]:
    algos = [a.strip() for a in text.split(",") if a.strip()]
    bad = [a for a in algos if a not in ALGORITHMS]
    if bad or not algos:
        raise ConfigurationError(f"unknown algorithm(s) {bad}; choose from {', '.join(ALGORITHMS)}")
    return algos


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prosumer-coalitions", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--out", help="output directory, overrides the config")
    common.add_argument("--algo", help="comma-separated subset of greedy,random,correlated")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run the whole pipeline")
    run.add_argument("--stage", choices=STAGES, help="run a single stage instead of all of them")
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage only")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        algos = _parse_algos(args.algo) if args.algo else list(ALGORITHMS)
        if args.command == "run":
            stages = [args.stage] if args.stage else list(STAGES)
        else:
            stages = [args.command]
        out = run_stages(cfg, stages, algos, algos_requested=bool(args.algo))
    except CoalitionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(f"wrote {', '.join(stages)} artifacts to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
