"""Command-line entry point.

    neolite gen-catalog   --seed 7 --catalog catalog.json
    neolite gen-workload  --catalog catalog.json --workload workload.json
    neolite embed-train   --catalog catalog.json --embeddings emb.json
    neolite bootstrap     --catalog catalog.json --workload workload.json --state run/
    neolite train         --state run/ --episodes 10
    neolite evaluate      --state run/ --split test
    neolite optimize      --state run/ --query q03

Settings come from built-in defaults, then ``--config FILE`` (JSON), then
individual flags.  ``--show-config`` prints the merged result and exits.
Exit codes: 0 success, 1 configuration or input error, 2 usage error,
3 integrity error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .driver import (RunConfig, bootstrap, evaluate, initial_metrics, load_state, new_state, run_episode,
                     save_state, train_catalog_embeddings, write_learning_curve, write_metrics_csv)
from .qpcore import ContractError, Query, plan_dumps
from .rvec import EmbeddingModel
from .search import search
from .simdb import (Catalog, CatalogError, ConfigError, generate_catalog, generate_workload, simulate_latency,
                    workload_from_json, workload_to_json)
from .valuemodel import IntegrityError

log = logging.getLogger("neolite")

PATH_KEYS = ("catalog", "workload", "embeddings", "state", "metrics")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults are overridden by it, flags override both)")
    common.add_argument("--show-config", action="store_true", help="print the effective config and exit")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--catalog", help="catalog JSON path")
    common.add_argument("--workload", help="workload JSON path")
    common.add_argument("--embeddings", help="row-vector embeddings JSON path")
    common.add_argument("--state", help="run directory")
    common.add_argument("--metrics", help="metrics CSV path (default: <state>/metrics.csv)")
    common.add_argument("--seed", type=int, help="network/training seed")
    common.add_argument("--catalog-seed", type=int, help="catalog generation seed")
    common.add_argument("--workload-seed", type=int, help="workload generation and split seed")
    common.add_argument("--variant", choices=("one-hot", "histogram", "r-vector"), help="query featurization")
    common.add_argument("--cost-mode", choices=("absolute", "relative"), help="training cost function")
    common.add_argument("--expansions", type=int, help="search expansion budget (deterministic cutoff)")
    common.add_argument("--wallclock", action="store_true", default=None,
                        help="use the wall-clock search cutoff instead of the expansion budget")
    common.add_argument("--cutoff-ms", type=float, help="wall-clock search cutoff in milliseconds")
    common.add_argument("--workers", type=int, help="threads for per-query search and simulation")
    common.add_argument("--steps", type=int, help="training steps per episode")
    common.add_argument("--cold-start", action="store_true", default=None,
                        help="re-initialize the network before every episode's training")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="neolite", description="Learned query optimizer on a simulated database.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-catalog", parents=[common], help="generate a synthetic catalog")
    sub.add_parser("gen-workload", parents=[common], help="generate a query workload for a catalog")
    sub.add_parser("embed-train", parents=[common], help="train row-vector embeddings on a catalog")
    sub.add_parser("bootstrap", parents=[common], help="create a run directory seeded with expert plans")
    t = sub.add_parser("train", parents=[common], help="run learning episodes on a run directory")
    t.add_argument("--episodes", type=int, required=True, help="number of episodes to run")
    e = sub.add_parser("evaluate", parents=[common], help="evaluate the current network")
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    o = sub.add_parser("optimize", parents=[common], help="plan one query with the current network")
    o.add_argument("--query", required=True, help="query id in the run, or a path to a query JSON file")
    return p


FLAG_TO_CONFIG = {"seed": "seed", "catalog_seed": "catalog_seed", "workload_seed": "workload_seed",
                  "variant": "variant", "cost_mode": "cost_mode", "expansions": "expansions",
                  "wallclock": "wallclock", "cutoff_ms": "cutoff_ms", "workers": "workers",
                  "steps": "train_steps"}


def resolve_config(args) -> tuple[RunConfig, dict]:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    paths = {k: None for k in PATH_KEYS}
    paths.update(raw.pop("paths", {}) or {})
    for k in PATH_KEYS:
        if getattr(args, k, None) is not None:
            paths[k] = getattr(args, k)
    base = RunConfig().to_json()
    base.update(raw)
    for flag, key in FLAG_TO_CONFIG.items():
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    if args.cold_start:
        base["warm_start"] = False
    return RunConfig.from_json(base), paths


def _need(paths: dict, key: str) -> str:
    if not paths.get(key):
        raise ConfigError(f"--{key} is required for this command")
    return paths[key]


def _load_catalog(path) -> Catalog:
    try:
        return Catalog.from_json(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read catalog {path}: {exc}") from exc


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, sort_keys=True) if args.json else text)


def _summary_text(summary: dict) -> str:
    return " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items())


def cmd_gen_catalog(args, cfg, paths):
    out = _need(paths, "catalog")
    cat = generate_catalog(cfg.schema, cfg.catalog_seed)
    Path(out).write_text(cat.dumps())
    _emit(args, {"catalog": out, "hash": cat.content_hash}, f"wrote {out} ({cat.content_hash[:12]})")


def cmd_gen_workload(args, cfg, paths):
    cat = _load_catalog(_need(paths, "catalog"))
    out = _need(paths, "workload")
    queries = generate_workload(cat, cfg.workload, cfg.workload_seed)
    Path(out).write_text(json.dumps(workload_to_json(queries), sort_keys=True, indent=1))
    _emit(args, {"workload": out, "queries": len(queries)}, f"wrote {len(queries)} queries to {out}")


def cmd_embed_train(args, cfg, paths):
    cat = _load_catalog(_need(paths, "catalog"))
    out = _need(paths, "embeddings")
    model = train_catalog_embeddings(cat, cfg)
    Path(out).write_text(model.dumps())
    _emit(args, {"embeddings": out, "vocab": len(model.tokens), "loss": model.loss_history},
          f"wrote {len(model.tokens)} vectors to {out}")


def cmd_bootstrap(args, cfg, paths):
    cat_path = _need(paths, "catalog")
    cat = _load_catalog(cat_path)
    queries = None
    if paths.get("workload"):
        queries = workload_from_json(json.loads(Path(paths["workload"]).read_text()))
    emb = None
    if cfg.variant == "r-vector":
        emb = EmbeddingModel.from_json(json.loads(Path(_need(paths, "embeddings")).read_text()))
    state = bootstrap(new_state(cfg, cat, queries, emb))
    state.history.append(initial_metrics(state))
    state_dir = _need(paths, "state")
    Path(state_dir).mkdir(parents=True, exist_ok=True)
    save_state(state, state_dir, cat_path)
    _emit(args, {"state": state_dir, "train": len(state.train_ids), "test": len(state.test_ids)},
          f"bootstrapped {state_dir}: {len(state.train_ids)} train / {len(state.test_ids)} test queries")


def _load(paths, cfg=None, args=None):
    state = load_state(_need(paths, "state"))
    if cfg is not None and args is not None:
        # runtime knobs may change between invocations; the learning setup may not
        for flag in ("expansions", "wallclock", "cutoff_ms", "workers"):
            v = getattr(args, flag, None)
            if v is not None:
                setattr(state.config, FLAG_TO_CONFIG[flag], v)
        if args.steps is not None:
            state.config.train_steps = args.steps
        if args.cold_start:
            state.config.warm_start = False
    return state


def cmd_train(args, cfg, paths):
    if args.episodes < 0:
        raise ConfigError("--episodes must be non-negative")
    state = _load(paths, cfg, args)
    out = []
    for _ in range(args.episodes):
        _, m = run_episode(state)
        out.append(m.summary())
        log.info("episode %d: %s", m.episode, _summary_text(m.summary()))
        if not args.json:
            print(_summary_text(m.summary()))
    save_state(state, paths["state"], Path(paths["state"]) / _catalog_rel(paths["state"]))
    if paths.get("metrics"):
        write_metrics_csv(paths["metrics"], state.history)
    write_learning_curve(Path(paths["state"]) / "learning_curve.csv", state.history)
    if args.json:
        print(json.dumps({"episode": state.episode, "episodes": out}, sort_keys=True))


def _catalog_rel(state_dir) -> str:
    return json.loads((Path(state_dir) / "run.json").read_text())["catalog_path"]


def cmd_evaluate(args, cfg, paths):
    state = _load(paths, cfg, args)
    splits = ("train", "test") if args.split == "all" else (args.split,)
    result = {}
    for split in splits:
        qs = state.train_queries if split == "train" else state.test_queries
        m = evaluate(state, qs, split)
        result[split] = {"mean_ratio": m.mean_ratio(split), "regressions": m.regressions(split),
                         "queries": [{"query_id": r.query_id, "neo_latency": r.neo_latency,
                                      "expert_latency": r.expert_latency, "ratio": r.ratio} for r in m.rows]}
    text = "\n".join(f"{s}: mean ratio {v['mean_ratio']:.4f}, regressions {v['regressions']}"
                     for s, v in result.items())
    _emit(args, {"episode": state.episode, **result}, text)


def cmd_optimize(args, cfg, paths):
    state = _load(paths, cfg, args)
    if args.query in state.by_id:
        query = state.by_id[args.query]
    else:
        try:
            query = Query.from_json(json.loads(Path(args.query).read_text()))
        except OSError as exc:
            raise ConfigError(f"{args.query} is neither a query id of this run nor a readable file") from exc
    net = state.net.snapshot()
    if net.trained:
        res = search(net.evaluator(state.featurizer.query(query), state.featurizer), query,
                     state.catalog, state.config.search_config())
        plan, predicted = res.plan, res.score
    else:
        from .expert import optimize
        plan, predicted = optimize(query, state.catalog, state.config.latency), None
    latency = simulate_latency(state.catalog, plan, query, state.config.latency)
    payload = {"plan": json.loads(plan_dumps(plan)), "key": plan.key, "predicted": predicted,
               "simulated_latency": latency}
    _emit(args, payload, json.dumps(payload, sort_keys=True, indent=1))


COMMANDS = {"gen-catalog": cmd_gen_catalog, "gen-workload": cmd_gen_workload, "embed-train": cmd_embed_train,
            "bootstrap": cmd_bootstrap, "train": cmd_train, "evaluate": cmd_evaluate,
            "optimize": cmd_optimize}


def dispatch(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg, paths = resolve_config(args)
        if args.show_config:
            print(json.dumps({"paths": paths, **cfg.to_json()}, sort_keys=True, indent=1))
            return 0
        COMMANDS[args.command](args, cfg, paths)
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, CatalogError, ContractError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
