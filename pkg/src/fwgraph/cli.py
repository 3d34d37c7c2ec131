"""Command line entry point: ``fwgraph <subcommand> -c config.yaml [key=value ...]``.

Every subcommand writes into ``<output_dir>/<subcommand>/`` and finishes with a
``manifest.json`` holding the config hash, the seed and library versions.
Nothing time-dependent is written, so reruns overwrite files with identical
bytes. Exit codes: 0 success (inconclusive verdicts included), 1 a failed
verdict or runtime error, 2 an invalid config.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .fast_slow_sim import (StopSpec, dump_paths_csv, integrate_ensemble, resolve_dt, simulate_path)
from .graph_process import build_spec, simulate_graph_ensemble, simulate_graph_path
from .level_integrals import dump_coefficients, edge_coefficients, gluing_probabilities
from .topology import GraphPoint
from .verification import (CONFIG_TYPES, FAIL, INCONCLUSIVE, ConfigError, ModelConfig, config_from_dict,
                           rung_seed, run_test)

log = logging.getLogger("fwgraph")

SUBCOMMANDS = ("build-graph", "coefficients", "gluing", "simulate", "limit-process", "verify-all")
TOP_KEYS = {"model", "seed", "output_dir", "workers", "simulate", "limit_process", "verify"}


# -- config ------------------------------------------------------------------------------

def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for key, value in overrides:
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, f"{p} is not a mapping")
        node[parts[-1]] = value
    return cfg


def load_config(path, overrides=(), seed=None) -> dict:
    cfg = {}
    if path is not None:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
        if not isinstance(cfg, dict):
            raise ConfigError("<root>", "config must be a mapping")
    cfg = apply_overrides(cfg, [parse_override(o) for o in overrides])
    if seed is not None:
        cfg["seed"] = seed
    return validate(cfg)


def validate(cfg: dict) -> dict:
    for k in cfg:
        if k not in TOP_KEYS:
            raise ConfigError(k, "unknown key")
    if "model" not in cfg:
        raise ConfigError("model", "required")
    m = cfg["model"]
    if isinstance(m, str):
        m = {"name": m}
    if not isinstance(m, dict) or "name" not in m:
        raise ConfigError("model.name", "required")
    cfg["model"] = m
    try:
        ModelConfig(**m)
    except TypeError as exc:
        raise ConfigError("model", str(exc)) from None
    cfg.setdefault("seed", 0)
    cfg.setdefault("output_dir", "fwgraph_out")
    cfg.setdefault("workers", 1)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError("workers", "must be a positive integer")
    for section in ("simulate", "limit_process", "verify"):
        if not isinstance(cfg.setdefault(section, {}), dict):
            raise ConfigError(section, "must be a mapping")
    for k, v in cfg["simulate"].items():
        if k in ("n_paths",) and (not isinstance(v, int) or v < 1):
            raise ConfigError(f"simulate.{k}", "must be a positive integer")
    verify = cfg["verify"]
    for k in verify:
        if k not in CONFIG_TYPES and k != "paths_multiplier":
            raise ConfigError(f"verify.{k}", "unknown test")
    for kind in CONFIG_TYPES:
        verify_config(cfg, kind)
    return cfg


def verify_config(cfg: dict, kind: str):
    """Test config for ``kind``: the top-level model and workers unless the section overrides them."""
    section = dict(cfg["verify"].get(kind) or {})
    section.setdefault("model", cfg["model"])
    section.setdefault("workers", cfg["workers"])
    section.setdefault("seed", rung_seed(cfg["seed"], 1000 + sorted(CONFIG_TYPES).index(kind)))
    return config_from_dict(kind, section, prefix=f"verify.{kind}.")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def versions() -> dict:
    import networkx
    import scipy
    import skimage
    return {"fwgraph": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "networkx": networkx.__version__, "scikit-image": skimage.__version__}


# -- outputs -----------------------------------------------------------------------------

class Outputs:
    def __init__(self, root, subcommand: str):
        self.dir = Path(root) / subcommand
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def json(self, name: str, payload) -> None:
        self.path(name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def manifest(self, subcommand: str, cfg: dict) -> None:
        self.json("manifest.json", {"subcommand": subcommand, "config_sha256": config_hash(cfg),
                                    "seed": cfg["seed"], "versions": versions(),
                                    "outputs": sorted(set(self.files) | {"manifest.json"})})


# -- subcommands -------------------------------------------------------------------------

def _model(cfg):
    return ModelConfig(**cfg["model"])


def _graph(model: ModelConfig, out: Outputs, dump: bool):
    graph = model.graph()
    log.info("graph: %d vertices, %d edges", len(graph.vertices), len(graph.edges))
    if dump:
        graph.dump(out.path("graph.json"))
    return graph


def _coefficients(model, graph):
    sys1 = model.system(1.0)
    return {e.id: edge_coefficients(sys1, graph, e.id, model.levels_per_edge) for e in graph.edges}


def _gluing(model, graph):
    sys1 = model.system(1.0)
    return {v.id: gluing_probabilities(sys1, graph, v.id) for v in graph.interior_vertices()}


def cmd_build_graph(cfg, args, out):
    _graph(_model(cfg), out, True)
    return 0


def cmd_coefficients(cfg, args, out):
    model = _model(cfg)
    graph = _graph(model, out, args.dump_graph)
    dump_coefficients(out.path("coefficients.json"), _coefficients(model, graph))
    return 0


def cmd_gluing(cfg, args, out):
    model = _model(cfg)
    graph = _graph(model, out, args.dump_graph)
    gluing = _gluing(model, graph)
    out.json("gluing.json", {str(k): g.to_dict() for k, g in sorted(gluing.items())})
    if args.dump_coefficients:
        dump_coefficients(out.path("coefficients.json"), _coefficients(model, graph), gluing)
    return 0


def _stop_spec(d: dict | None) -> StopSpec | None:
    if not d:
        return None
    conv = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
    try:
        return StopSpec(**conv)
    except TypeError as exc:
        raise ConfigError("simulate.stop", str(exc)) from None


def cmd_simulate(cfg, args, out):
    s = cfg["simulate"]
    if "epsilon" not in s:
        raise ConfigError("simulate.epsilon", "required")
    model = _model(cfg)
    eps = float(s["epsilon"])
    sys_ = model.system(eps)
    dt = resolve_dt(s.get("dt"), eps)
    q0 = np.asarray(s.get("q0", (1.0, 0.0)), dtype=float)
    horizon = float(s.get("horizon", 1.0))
    n = int(s.get("n_paths", 1000))
    stop = _stop_spec(s.get("stop"))
    res = integrate_ensemble(sys_, np.repeat(q0[None, :], n, 0), horizon, dt, cfg["seed"], stop)
    h_end = sys_.H(res.event_state)
    kinds = sorted(set(res.event_kind.tolist()))
    out.json("summary.json", {"epsilon": eps, "dt": dt, "n_paths": n, "horizon": horizon,
                              "events": {k: res.count(k) for k in kinds},
                              "mean_event_time": float(res.event_time.mean()),
                              "mean_h_at_event": float(np.mean(h_end)),
                              "std_h_at_event": float(np.std(h_end, ddof=1)) if n > 1 else 0.0})
    graph = None
    if args.dump_graph or args.dump_paths:
        graph = _graph(model, out, args.dump_graph)
    if args.dump_coefficients:
        dump_coefficients(out.path("coefficients.json"), _coefficients(model, graph))
    if args.dump_paths:
        recs = [simulate_path(sys_, graph, q0, horizon, dt, stop, cfg["seed"], k)
                for k in range(min(args.dump_paths, n))]
        dump_paths_csv(out.path("paths.csv"), recs)
    return 0


def cmd_limit_process(cfg, args, out):
    s = cfg["limit_process"]
    model = _model(cfg)
    graph = _graph(model, out, args.dump_graph)
    coeffs = _coefficients(model, graph)
    gluing = _gluing(model, graph)
    if args.dump_coefficients:
        dump_coefficients(out.path("coefficients.json"), coeffs, gluing)
    spec = build_spec(graph, coeffs, gluing, s.get("vertex_offset"))
    st = s.get("start", {})
    if "h" not in st or "edge" not in st:
        raise ConfigError("limit_process.start", "needs h and edge")
    start = GraphPoint(float(st["h"]), int(st["edge"]), st.get("vertex"))
    horizon = float(s.get("horizon", 1.0))
    dt = float(s.get("dt", 1e-3))
    n = int(s.get("n_paths", 1000))
    h, edge, stop_t, absorbed, visits = simulate_graph_ensemble(spec, start, horizon, dt, cfg["seed"], np.arange(n))
    counts = {}
    for vs in visits:
        for vid, _, j in vs:
            counts.setdefault(str(vid), {}).setdefault(str(j), 0)
            counts[str(vid)][str(j)] += 1
    out.json("summary.json", {"n_paths": n, "horizon": horizon, "dt": dt, "absorbed": int(absorbed.sum()),
                              "edge_occupancy": {str(e.id): int(np.sum(edge == e.id)) for e in graph.edges},
                              "mean_h": float(h.mean()), "vertex_choices": counts})
    if args.dump_paths:
        with open(out.path("graph_paths.csv"), "w") as fh:
            fh.write("path,t,h,edge\n")
            for k in range(min(args.dump_paths, n)):
                p = simulate_graph_path(spec, start, horizon, dt, cfg["seed"], k)
                for t, pt in zip(p.times, p.points):
                    fh.write(f"{k},{t!r},{pt.h!r},{pt.edge_id}\n")
    return 0


def cmd_verify_all(cfg, args, out):
    mult = float(args.paths if args.paths is not None else cfg["verify"].get("paths_multiplier", 1.0))
    status = 0
    for kind in CONFIG_TYPES:
        report = run_test(kind, verify_config(cfg, kind), mult)
        out.path(f"{kind}.json").write_text(report.to_json())
        out.path(f"{kind}.txt").write_text(report.text())
        log.info("%s: %s (%.1f s)", kind, report.verdict, report.runtime)
        print(f"{kind}: {report.verdict}")
        if report.verdict == INCONCLUSIVE:
            log.warning("%s is inconclusive: %s", kind, report.summary.get("reason", "see report"))
        if report.verdict == FAIL:
            status = 1
    return status


COMMANDS = {
    "build-graph": cmd_build_graph,
    "coefficients": cmd_coefficients,
    "gluing": cmd_gluing,
    "simulate": cmd_simulate,
    "limit-process": cmd_limit_process,
    "verify-all": cmd_verify_all,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fwgraph", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("overrides", nargs="*", metavar="key=value", help="dotted config overrides")
    p.add_argument("-c", "--config", help="YAML config file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--dump-graph", action="store_true")
    p.add_argument("--dump-coefficients", action="store_true")
    p.add_argument("--dump-paths", type=int, default=0, metavar="N", help="write the first N paths as CSV")
    p.add_argument("--paths", type=float, help="path-count multiplier for verify-all")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(subcommand: str, config_path, overrides=(), **kw) -> int:
    """Programmatic equivalent of the command line."""
    argv = [subcommand, *overrides]
    if config_path is not None:
        argv += ["-c", str(config_path)]
    for k, v in kw.items():
        flag = "--" + k.replace("_", "-")
        if v is True:
            argv.append(flag)
        elif v not in (None, False):
            argv += [flag, str(v)]
    return main(argv)


def main(argv=None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except (OSError, yaml.YAMLError) as exc:
        print(f"could not read config: {exc}", file=sys.stderr)
        return 2
    out = Outputs(cfg["output_dir"], args.subcommand)
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.subcommand](cfg, args, out)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"{args.subcommand} failed: {type(exc).__module__}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    out.manifest(args.subcommand, cfg)
    log.info("%s finished in %.1f s", args.subcommand, time.perf_counter() - t0)
    return code
