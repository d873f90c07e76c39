"""The learning loop: bootstrap from the expert, then train, search, execute, record.

One episode:

1. rebuild targets from all experience and train the value network;
2. freeze a copy of the parameters;
3. search a plan for every training query with that copy, simulate it and
   append the result to experience;
4. evaluate the test queries without recording anything.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .expert import optimize
from .featurize import Featurizer
from .qpcore import ContractError, PlanForest, Query, plan_from_json
from .rvec import EmbeddingModel, SgnsParams, build_sentences, train_embeddings
from .search import SearchConfig, search
from .simdb import (Catalog, ConfigError, LatencyModel, SchemaConfig, WorkloadConfig, generate_catalog,
                    generate_workload, imdb_like_schema, simulate_latency, workload_from_json,
                    workload_to_json)
from .valuemodel import (ExperienceEntry, IntegrityError, NetConfig, Sample, TargetTable,
                         ValueNet, load_net, save_net, train)

METRIC_COLUMNS = ("episode", "split", "query_id", "neo_latency", "expert_latency", "ratio")


@dataclass
class NetWidths:
    query_layers: tuple = (128, 64, 32)
    conv_channels: tuple = (256, 128, 64)
    post_layers: tuple = (32, 16)
    lr: float = 1e-3


@dataclass
class RunConfig:
    catalog_seed: int = 0
    workload_seed: int = 0
    schema: SchemaConfig = field(default_factory=imdb_like_schema)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    variant: str = "histogram"
    cost_mode: str = "absolute"
    transform: str = "log1p"
    seed: int = 0
    train_fraction: float = 0.8
    train_steps: int = 300
    batch: int = 16
    final_lr: float = 1.0
    warm_start: bool = True
    expansions: int = 40
    wallclock: bool = False
    cutoff_ms: float = 250.0
    allow_cross_products: bool = False
    workers: int = 1
    latency: LatencyModel = field(default_factory=LatencyModel)
    sgns: SgnsParams = field(default_factory=lambda: SgnsParams(epochs=3))
    denormalize: bool = True
    net: NetWidths = field(default_factory=NetWidths)

    def __post_init__(self):
        if self.variant not in ("one-hot", "histogram", "r-vector"):
            raise ConfigError(f"unknown featurization {self.variant!r}")
        if self.cost_mode not in ("absolute", "relative"):
            raise ConfigError(f"unknown cost mode {self.cost_mode!r}")
        if not 0 < self.final_lr <= 1:
            raise ConfigError("final_lr is a fraction of the learning rate in (0, 1]")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")
        if self.train_steps < 0 or self.batch <= 0 or self.expansions <= 0 or self.workers <= 0:
            raise ConfigError("steps must be non-negative; batch, expansions and workers positive")

    def search_config(self) -> SearchConfig:
        if self.wallclock:
            return SearchConfig(cutoff_ms=self.cutoff_ms, allow_cross_products=self.allow_cross_products)
        return SearchConfig.expansions(self.expansions, self.allow_cross_products)

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["schema"] = self.schema.to_json()
        d["workload"] = self.workload.to_json()
        d["latency"] = self.latency.to_json()
        d["sgns"] = asdict(self.sgns)
        d["net"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.net).items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "schema" in d:
            d["schema"] = SchemaConfig.from_json(d["schema"])
        if "workload" in d:
            d["workload"] = WorkloadConfig.from_json(d["workload"])
        if "latency" in d:
            d["latency"] = LatencyModel.from_json(d["latency"])
        if "sgns" in d:
            d["sgns"] = SgnsParams(**d["sgns"])
        if "net" in d:
            d["net"] = NetWidths(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["net"].items()})
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class QueryMetric:
    split: str
    query_id: str
    predicted: float
    neo_latency: float
    expert_latency: float

    @property
    def ratio(self) -> float:
        return self.neo_latency / self.expert_latency


@dataclass
class EpisodeMetrics:
    episode: int
    rows: list[QueryMetric]
    losses: list[float] = field(default_factory=list)

    def ratios(self, split: str) -> list[float]:
        return [r.ratio for r in self.rows if r.split == split]

    def mean_ratio(self, split: str) -> float:
        v = self.ratios(split)
        return float(np.mean(v)) if v else math.nan

    def regressions(self, split: str) -> int:
        return sum(r > 1.0 for r in self.ratios(split))

    def summary(self) -> dict:
        return {"episode": self.episode, "train_mean_ratio": self.mean_ratio("train"),
                "test_mean_ratio": self.mean_ratio("test"),
                "test_regressions": self.regressions("test"),
                "loss_first": self.losses[0] if self.losses else None,
                "loss_last": self.losses[-1] if self.losses else None}

    def csv_rows(self) -> list[list]:
        return [[self.episode, r.split, r.query_id, repr(r.neo_latency), repr(r.expert_latency), repr(r.ratio)]
                for r in self.rows]


def write_metrics_csv(path, history: Sequence[EpisodeMetrics]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in history:
        w.writerows(m.csv_rows())
    Path(path).write_text(buf.getvalue())


def write_learning_curve(path, history: Sequence[EpisodeMetrics]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "train_mean_ratio", "test_mean_ratio", "test_regressions"])
    for m in history:
        s = m.summary()
        w.writerow([s["episode"], repr(s["train_mean_ratio"]), repr(s["test_mean_ratio"]), s["test_regressions"]])
    Path(path).write_text(buf.getvalue())


# --------------------------------------------------------------------------
# state

@dataclass
class RunState:
    config: RunConfig
    catalog: Catalog
    queries: list[Query]
    train_ids: list[str]
    test_ids: list[str]
    featurizer: Featurizer
    net: ValueNet
    embeddings: EmbeddingModel | None = None
    experience: list[ExperienceEntry] = field(default_factory=list)
    baselines: dict[str, float] = field(default_factory=dict)
    expert_plans: dict[str, PlanForest] = field(default_factory=dict)
    episode: int = 0
    history: list[EpisodeMetrics] = field(default_factory=list)
    targets: TargetTable | None = None
    _encodings: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.targets is None:
            self.targets = TargetTable(self.config.cost_mode, self.config.transform)
        self.by_id = {q.query_id: q for q in self.queries}

    @property
    def train_queries(self) -> list[Query]:
        return [self.by_id[i] for i in self.train_ids]

    @property
    def test_queries(self) -> list[Query]:
        return [self.by_id[i] for i in self.test_ids]

    def record(self, entry: ExperienceEntry) -> None:
        if entry.query_id not in self.train_ids:
            raise ContractError(f"query {entry.query_id} is not a training query")
        self.experience.append(entry)
        self.targets.add(entry)


def benchmark_config(seed: int = 0, variant: str = "histogram", cost_mode: str = "absolute",
                     **overrides) -> RunConfig:
    """Setup of the scaled learning experiments.

    Correlated seven-table catalog with Zipf-skewed attribute values, 50
    queries drawn from 10 templates (40 train / 10 test) and an expansion
    cutoff.  ``seed`` picks the network initialization and training order;
    catalog and workload stay fixed so seeds are comparable.
    """
    base = dict(seed=seed, variant=variant, cost_mode=cost_mode,
                schema=imdb_like_schema(value_skew=1.0), workload=WorkloadConfig(templates=10),
                expansions=40, final_lr=0.05)
    base.update(overrides)
    return RunConfig(**base)


def split_workload(queries: Sequence[Query], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    ids = [q.query_id for q in queries]
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(fraction * len(ids)))
    if not 0 < n_train < len(ids):
        raise ConfigError("workload too small for a train/test split")
    return sorted(ids[i] for i in order[:n_train]), sorted(ids[i] for i in order[n_train:])


def _new_net(config: RunConfig, featurizer: Featurizer) -> ValueNet:
    w = config.net
    return ValueNet(NetConfig(featurizer.query_width, featurizer.node_width, w.query_layers,
                              w.conv_channels, w.post_layers, lr=w.lr, seed=config.seed))


def train_catalog_embeddings(catalog: Catalog, config: RunConfig) -> EmbeddingModel:
    return train_embeddings(build_sentences(catalog, denormalize=config.denormalize), config.sgns)


def new_state(config: RunConfig, catalog: Catalog | None = None, queries: list[Query] | None = None,
              embeddings: EmbeddingModel | None = None) -> RunState:
    catalog = catalog if catalog is not None else generate_catalog(config.schema, config.catalog_seed)
    if queries is None:
        queries = generate_workload(catalog, config.workload, config.workload_seed)
    if config.variant == "r-vector" and embeddings is None:
        embeddings = train_catalog_embeddings(catalog, config)
    featurizer = Featurizer(catalog, config.variant, embeddings if config.variant == "r-vector" else None)
    train_ids, test_ids = split_workload(queries, config.train_fraction, config.workload_seed)
    return RunState(config, catalog, list(queries), train_ids, test_ids, featurizer,
                    _new_net(config, featurizer), embeddings)


def _episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def _map(state: RunState, fn, items):
    if state.config.workers > 1:
        with ThreadPoolExecutor(state.config.workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# --------------------------------------------------------------------------
# loop

def bootstrap(state: RunState) -> RunState:
    if state.experience:
        raise ContractError("bootstrap expects empty experience")
    model = state.config.latency
    for q in state.queries:
        plan = optimize(q, state.catalog, model, state.config.allow_cross_products)
        state.expert_plans[q.query_id] = plan
        state.baselines[q.query_id] = simulate_latency(state.catalog, plan, q, model)
    for q in state.train_queries:
        lat = state.baselines[q.query_id]
        state.record(ExperienceEntry(q.query_id, state.expert_plans[q.query_id], lat, lat))
    return state


def _encoded_samples(state: RunState) -> list[Sample]:
    out = state.targets.samples()
    fz = state.featurizer
    for s in out:
        k = (s.query_id, s.plan.key)
        t = state._encodings.get(k)
        if t is None:
            t = state._encodings[k] = fz.plan(s.plan)
        s.ptree = t
        s.qvec = fz.query(state.by_id[s.query_id])
    return out


def train_step(state: RunState) -> list[float]:
    cfg = state.config
    if not cfg.warm_start:
        state.net = _new_net(cfg, state.featurizer)
    samples = _encoded_samples(state)
    return train(state.net, samples, cfg.train_steps, cfg.batch, _episode_seed(cfg.seed, state.episode + 1),
                 cfg.final_lr)


def _plan_with(state: RunState, net: ValueNet | None, query: Query) -> tuple[PlanForest, float]:
    if net is None or not net.trained:
        return state.expert_plans[query.query_id], math.nan
    scorer = net.evaluator(state.featurizer.query(query), state.featurizer)
    res = search(scorer, query, state.catalog, state.config.search_config())
    return res.plan, res.score


def _run_queries(state: RunState, net: ValueNet | None, queries: Sequence[Query], split: str):
    model = state.config.latency

    def one(q):
        plan, pred = _plan_with(state, net, q)
        return plan, QueryMetric(split, q.query_id, pred, simulate_latency(state.catalog, plan, q, model),
                                 state.baselines[q.query_id])

    return _map(state, one, queries)


def evaluate(state: RunState, queries: Sequence[Query] | None = None, split: str = "test",
             episode: int | None = None) -> EpisodeMetrics:
    """Search and simulate without touching experience or parameters."""
    if not state.baselines:
        raise ContractError("evaluate needs a bootstrapped state")
    queries = state.test_queries if queries is None else queries
    net = state.net.snapshot()
    rows = [m for _, m in _run_queries(state, net, queries, split)]
    return EpisodeMetrics(state.episode if episode is None else episode, rows)


def run_episode(state: RunState) -> tuple[RunState, EpisodeMetrics]:
    if not state.baselines:
        raise ContractError("run_episode needs a bootstrapped state")
    losses = train_step(state)
    snapshot = state.net.snapshot()
    results = _run_queries(state, snapshot, state.train_queries, "train")
    for (plan, m) in results:
        state.record(ExperienceEntry(m.query_id, plan, m.neo_latency, m.expert_latency))
    state.episode += 1
    test = evaluate(state, state.test_queries, "test")
    metrics = EpisodeMetrics(state.episode, [m for _, m in results] + test.rows, losses)
    state.history.append(metrics)
    leaked = {e.query_id for e in state.experience} & set(state.test_ids)
    if leaked:
        raise ContractError(f"test queries leaked into experience: {sorted(leaked)}")
    return state, metrics


def initial_metrics(state: RunState) -> EpisodeMetrics:
    """Episode-0 row: the expert's own plans on both splits."""
    rows = [QueryMetric(split, q.query_id, math.nan, state.baselines[q.query_id], state.baselines[q.query_id])
            for split, qs in (("train", state.train_queries), ("test", state.test_queries)) for q in qs]
    return EpisodeMetrics(0, rows)


def run_experiment(config: RunConfig, episodes: int, catalog: Catalog | None = None,
                   queries: list[Query] | None = None, embeddings: EmbeddingModel | None = None,
                   on_episode: Callable[[EpisodeMetrics], None] | None = None) -> RunState:
    state = bootstrap(new_state(config, catalog, queries, embeddings))
    state.history.append(initial_metrics(state))
    for _ in range(episodes):
        _, m = run_episode(state)
        if on_episode is not None:
            on_episode(m)
    return state


# --------------------------------------------------------------------------
# persistence

def save_experience(path, experience: Sequence[ExperienceEntry]) -> None:
    with open(path, "w") as fh:
        for e in experience:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def load_experience(path, by_id: dict[str, Query]) -> list[ExperienceEntry]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            q = by_id[d["query_id"]]
            out.append(ExperienceEntry(d["query_id"], plan_from_json(d["plan"], q), d["latency"], d["baseline"]))
    return out


def save_state(state: RunState, path, catalog_path=None) -> None:
    """Write a run directory: run.json, experience.jsonl, net.npz (+ embeddings.json)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h = state.catalog.content_hash
    if catalog_path is None:
        catalog_path = path / "catalog.json"
        Path(catalog_path).write_text(state.catalog.dumps())
    run = {
        "config": state.config.to_json(),
        "catalog_hash": h,
        "catalog_path": os.path.relpath(catalog_path, path),
        "queries": workload_to_json(state.queries),
        "train_ids": state.train_ids,
        "test_ids": state.test_ids,
        "baselines": state.baselines,
        "expert_plans": {k: p.to_json() for k, p in state.expert_plans.items()},
        "episode": state.episode,
        "history": [m.summary() for m in state.history],
    }
    (path / "run.json").write_text(json.dumps(run, sort_keys=True, indent=1))
    save_experience(path / "experience.jsonl", state.experience)
    if state.embeddings is not None:
        (path / "embeddings.json").write_text(state.embeddings.dumps())
    save_net(path / "net.npz", state.net, _manifest(state.config, h))
    write_metrics_csv(path / "metrics.csv", state.history)


def _manifest(config: RunConfig, catalog_hash: str) -> dict:
    return {"catalog_hash": catalog_hash, "variant": config.variant,
            "cost_mode": config.cost_mode, "transform": config.transform}


def load_state(path, catalog: Catalog | None = None) -> RunState:
    path = Path(path)
    try:
        run = json.loads((path / "run.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"cannot read run manifest: {exc}") from exc
    config = RunConfig.from_json(run["config"])
    if catalog is None:
        catalog = Catalog.from_json(json.loads((path / run["catalog_path"]).read_text()))
    if catalog.content_hash != run.get("catalog_hash"):
        raise IntegrityError("catalog does not match the run's recorded hash")
    net, _ = load_net(path / "net.npz", _manifest(config, run["catalog_hash"]))
    queries = workload_from_json(run["queries"])
    embeddings = None
    if (path / "embeddings.json").exists():
        embeddings = EmbeddingModel.from_json(json.loads((path / "embeddings.json").read_text()))
    featurizer = Featurizer(catalog, config.variant, embeddings if config.variant == "r-vector" else None)
    if (net.config.query_width, net.config.node_width) != (featurizer.query_width, featurizer.node_width):
        raise IntegrityError("network widths do not match the featurization")
    state = RunState(config, catalog, queries, run["train_ids"], run["test_ids"], featurizer, net, embeddings)
    state.baselines = {k: float(v) for k, v in run["baselines"].items()}
    state.expert_plans = {k: plan_from_json(v, state.by_id[k]) for k, v in run["expert_plans"].items()}
    state.episode = run["episode"]
    for e in load_experience(path / "experience.jsonl", state.by_id):
        state.record(e)
    if (path / "metrics.csv").exists():
        state.history = read_metrics_csv(path / "metrics.csv")
    return state


def read_metrics_csv(path) -> list[EpisodeMetrics]:
    by_ep: dict[int, list[QueryMetric]] = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            by_ep.setdefault(int(row["episode"]), []).append(
                QueryMetric(row["split"], row["query_id"], math.nan,
                            float(row["neo_latency"]), float(row["expert_latency"])))
    return [EpisodeMetrics(k, v) for k, v in sorted(by_ep.items())]
