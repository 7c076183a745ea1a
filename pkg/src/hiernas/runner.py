"""Experiment orchestration: config files, seeded runs, checkpoints, exports
and the search-vs-random comparison."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, fields, asdict
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .evaluation import (
    BenchmarkTable,
    CellConstraints,
    ConstrainedEvaluator,
    Evaluator,
    RandomEvaluator,
    SurrogateConfig,
    SurrogateEvaluator,
    TabularEvaluator,
)
from .evolution import (
    EvolutionConfig,
    GenerationStats,
    PopulationMember,
    check_population,
    initial_population,
    step_generation,
)
from .module_graph import GraphError, ModuleDef, flatten, hierarchy_summary, hierarchy_to_dot, walk
from .registry import ListsState, initialize, layer_ops

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_VERSION = 1
BUILTIN_TABLE = "builtin:nasbench_sample"
PRESETS = ("fmnist-surrogate", "nasbench")


class ConfigError(Exception):
    pass


class CorruptCheckpoint(Exception):
    pass


# ---------------------------------------------------------------- config

_EVO_FIELDS = {f.name for f in fields(EvolutionConfig)}


@dataclass
class ExperimentConfig:
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    layers: list[str | dict] = field(default_factory=lambda: ["conv1_32", "conv2_32", "conv3_32",
                                                              "pool2", "pool3", "pool5"])
    evaluator: str = "surrogate"  # surrogate | tabular | random
    table_path: str | None = None
    table_metric: str = "validation"
    random_constant: float = 0.5
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    constraints: CellConstraints | None = None
    generations: int = 20
    output_dir: str = "runs"
    seeds: list[int] = field(default_factory=lambda: [0])
    checkpoint_every: int = 1
    name: str = "experiment"

    def __post_init__(self):
        if self.generations < 1:
            raise ConfigError("generations must be >= 1")
        if self.evaluator not in ("surrogate", "tabular", "random"):
            raise ConfigError(f"unknown evaluator {self.evaluator!r}")
        if self.evaluator == "tabular":
            if not self.table_path:
                raise ConfigError("tabular evaluator needs table_path")
            if self.table_path != BUILTIN_TABLE and not Path(self.table_path).exists():
                raise ConfigError(f"benchmark table {self.table_path} does not exist")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        evo = {k: data.pop(k) for k in list(data) if k in _EVO_FIELDS}
        known = {f.name for f in fields(cls)} - {"evolution"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "surrogate" in data and data["surrogate"] is not None:
                s = dict(data["surrogate"])
                if "preferred_ops" in s:
                    s["preferred_ops"] = tuple(s["preferred_ops"])
                data["surrogate"] = SurrogateConfig(**s)
            else:
                data.pop("surrogate", None)
            if data.get("constraints") is not None:
                c = dict(data["constraints"])
                if "allowed_ops" in c:
                    c["allowed_ops"] = frozenset(c["allowed_ops"])
                data["constraints"] = CellConstraints(**c)
            if "seeds" in data:
                data["seeds"] = [int(s) for s in data["seeds"]]
            return cls(evolution=EvolutionConfig(**evo), **data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "name": self.name}
        d.update(self.evolution.to_dict())
        d.update({
            "layers": list(self.layers),
            "evaluator": self.evaluator,
            "table_path": self.table_path,
            "table_metric": self.table_metric,
            "random_constant": self.random_constant,
            "surrogate": {**asdict(self.surrogate), "preferred_ops": list(self.surrogate.preferred_ops)},
            "constraints": None if self.constraints is None else {
                **asdict(self.constraints), "allowed_ops": sorted(self.constraints.allowed_ops)},
            "generations": self.generations,
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
            "checkpoint_every": self.checkpoint_every,
        })
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)


def load_config(source: str | Path) -> ExperimentConfig:
    """Load a YAML config file, or a bundled preset by name."""
    text = None
    if str(source) in PRESETS:
        text = resources.files("hiernas.presets").joinpath(f"{source}.yaml").read_text()
    else:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {source}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {source} must be a mapping")
    return ExperimentConfig.from_dict(data)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def load_table(path: str) -> BenchmarkTable:
    if path == BUILTIN_TABLE:
        with resources.as_file(resources.files("hiernas.data").joinpath("nasbench_sample.jsonl")) as p:
            return BenchmarkTable.load(p)
    return BenchmarkTable.load(path)


def build_evaluator(config: ExperimentConfig, table: BenchmarkTable | None = None) -> Evaluator:
    surrogate = SurrogateEvaluator(config.surrogate)
    if config.evaluator == "tabular":
        table = table if table is not None else load_table(config.table_path)
        return TabularEvaluator(table, config.constraints or CellConstraints(), config.table_metric,
                                config.evolution.failure_fitness)
    if config.evaluator == "random":
        inner: Evaluator = RandomEvaluator(config.random_constant, reporter=surrogate)
    else:
        inner = surrogate
    if config.constraints is not None:
        return ConstrainedEvaluator(inner, config.constraints, config.evolution.failure_fitness)
    return inner


# ---------------------------------------------------------------- run state


@dataclass
class RunState:
    """Everything needed to continue a seeded run bit-exactly."""

    config: ExperimentConfig
    seed: int
    generation: int  # next generation to run
    rng: np.random.Generator
    lists: ListsState
    population: list[PopulationMember]
    history: list[GenerationStats] = field(default_factory=list)
    best: PopulationMember | None = None

    @classmethod
    def start(cls, config: ExperimentConfig, seed: int) -> "RunState":
        evo = config.evolution
        rng = np.random.default_rng(seed)
        lists = initialize(layer_ops(config.layers), evo.prior_fitness, evo.notable_max, evo.base_ttl)
        population = initial_population(lists, evo, rng)
        return cls(config, seed, 0, rng, lists, population)

    def step(self, evaluator: Evaluator) -> GenerationStats:
        evo = self.config.evolution
        evaluated = list(self.population)
        self.population, stats = step_generation(self.population, self.lists, evaluator, evo, self.rng,
                                                 self.generation)
        top = max(evaluated, key=lambda m: m.report)
        if self.best is None or top.report > self.best.report:
            self.best = PopulationMember(top.root, top.fitness, False, top.age, top.reported_fitness, top.status)
        self.history.append(stats)
        self.generation += 1
        return stats

    # -------------------------------------------------------- checkpointing

    def to_dict(self) -> dict:
        store = self.lists.module_store
        roots = [m.root for m in self.population]
        if self.best is not None:
            roots.append(self.best.root)
        roots += [store[i] for i in list(self.lists.notable) + list(self.lists.candidate)]
        modules = _modules_children_first(roots, store)
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "generation": self.generation,
            "config": self.config.to_dict(),
            "rng_state": self.rng.bit_generator.state,
            **self.lists.to_dict(),
            "modules": [m.to_dict() for m in modules],
            "population": [m.to_dict() for m in self.population],
            "best": None if self.best is None else self.best.to_dict(),
            "history": [asdict(s) for s in self.history],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunState":
        try:
            if data.get("schema_version") != SCHEMA_VERSION:
                raise CorruptCheckpoint(f"unsupported checkpoint schema {data.get('schema_version')}")
            config = ExperimentConfig.from_dict(data["config"])
            store: dict[str, ModuleDef] = {}
            for md in data["modules"]:
                m = ModuleDef.from_dict(md)
                store[m.id] = m
            lists = ListsState.from_dict(data, store)
            rng = np.random.default_rng()
            rng.bit_generator.state = data["rng_state"]
            population = [_member(d, store) for d in data["population"]]
            best = _member(data["best"], store) if data.get("best") else None
            history = [GenerationStats(**h) for h in data["history"]]
            return cls(config, data["seed"], data["generation"], rng, lists, population, history, best)
        except CorruptCheckpoint:
            raise
        except (KeyError, TypeError, ValueError, GraphError, ConfigError) as exc:
            raise CorruptCheckpoint(f"cannot restore checkpoint: {exc}") from exc

    def save(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict()))
        tmp.replace(path)


def _member(d: dict, store: dict[str, ModuleDef]) -> PopulationMember:
    return PopulationMember(store[d["root"]], d["fitness"], d["dirty"], d["age"], d.get("reported_fitness"),
                            d.get("status"))


def _modules_children_first(roots, store) -> list[ModuleDef]:
    out: dict[str, ModuleDef] = {}

    def visit(m: ModuleDef):
        if m.id in out:
            return
        for cid in m.child_ids():
            visit(store[cid])
        out[m.id] = m

    for r in roots:
        visit(r)
    return list(out.values())


def load_checkpoint(path: str | Path) -> RunState:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CorruptCheckpoint(f"checkpoint {path} is not a JSON object")
    return RunState.from_dict(data)


# ---------------------------------------------------------------- outputs


def stats_csv(history: list[GenerationStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GenerationStats.CSV_COLUMNS)
    for s in history:
        w.writerow(s.csv_row())
    return buf.getvalue()


def best_export(state: RunState) -> dict:
    if state.best is None:
        raise CorruptCheckpoint("checkpoint holds no evaluated member")
    store = state.lists.module_store
    root = state.best.root
    modules: dict[str, ModuleDef] = {}
    for m in walk(root, store):
        modules.setdefault(m.id, m)
    return {
        "root": root.id,
        "fitness": state.best.fitness,
        "reported_fitness": state.best.report,
        "modules": [m.to_dict() for m in _modules_children_first([root], store)],
        "summary": hierarchy_summary(root, store),
        "flat": flatten(root, store).to_dict(),
    }


def load_export(data: dict | str | Path) -> tuple[ModuleDef, dict[str, ModuleDef]]:
    """Rebuild the root module and its store from a JSON export."""
    if not isinstance(data, dict):
        data = json.loads(Path(data).read_text())
    store = {}
    for md in data["modules"]:
        m = ModuleDef.from_dict(md)
        store[m.id] = m
    return store[data["root"]], store


def export_best(checkpoint: str | Path | RunState, fmt: str, out: str | Path | None = None) -> str:
    """Render the best member of a checkpoint as JSON (hierarchy + phenotype)
    or DOT (phenotype; the hierarchy goes to a ``*_modules.dot`` sibling)."""
    state = checkpoint if isinstance(checkpoint, RunState) else load_checkpoint(checkpoint)
    if fmt == "json":
        text = json.dumps(best_export(state), indent=2)
    elif fmt == "dot":
        if state.best is None:
            raise CorruptCheckpoint("checkpoint holds no evaluated member")
        store = state.lists.module_store
        text = flatten(state.best.root, store).to_dot(f"best_{state.best.root.id[:8]}")
        if out is not None:
            Path(out).with_name(Path(out).stem + "_modules.dot").write_text(
                hierarchy_to_dot(state.best.root, store))
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    if out is not None:
        Path(out).write_text(text)
    return text


# ---------------------------------------------------------------- driving


@dataclass
class SeedResult:
    seed: int
    history: list[GenerationStats]
    state: RunState
    run_dir: Path | None = None

    @property
    def best_curve(self) -> list[float]:
        return [s.best_fitness for s in self.history]

    @property
    def mean_curve(self) -> list[float]:
        return [s.mean_fitness for s in self.history]

    @property
    def best_so_far(self) -> float:
        return max(self.best_curve)


def drive(state: RunState, evaluator: Evaluator, run_dir: Path | None, until: int | None = None,
          validate_each_step: bool = False) -> SeedResult:
    """Advance ``state`` to ``until`` generations (default: the configured
    count), writing CSV, checkpoints and exports into ``run_dir``."""
    config = state.config
    until = config.generations if until is None else until
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.yaml").write_text(dump_config(config))
    try:
        while state.generation < until:
            state.step(evaluator)
            if validate_each_step:
                check_population(state.population, state.lists)
                state.lists.check_invariants()
            if run_dir is not None:
                (run_dir / "stats.csv").write_text(stats_csv(state.history))
                if config.checkpoint_every and state.generation % config.checkpoint_every == 0:
                    state.save(run_dir / "checkpoints" / f"gen_{state.generation:04d}.json")
    except KeyboardInterrupt:
        if run_dir is not None:
            state.save(run_dir / "checkpoint.json")
            logger.warning("interrupted at generation %d; checkpoint flushed", state.generation)
        raise
    if run_dir is not None:
        state.save(run_dir / "checkpoint.json")
        export_best(state, "json", run_dir / "best.json")
        export_best(state, "dot", run_dir / "best.dot")
    return SeedResult(state.seed, state.history, state, run_dir)


def run_seed(config: ExperimentConfig, seed: int, run_dir: str | Path | None = None,
             evaluator: Evaluator | None = None) -> SeedResult:
    evaluator = evaluator if evaluator is not None else build_evaluator(config)
    state = RunState.start(config, seed)
    return drive(state, evaluator, Path(run_dir) if run_dir is not None else None)


def resume(checkpoint: str | Path, run_dir: str | Path | None = None, generations: int | None = None) -> SeedResult:
    state = load_checkpoint(checkpoint)
    if generations is not None:
        state.config = state.config.replace(generations=generations)
    if run_dir is None:
        p = Path(checkpoint).resolve().parent
        run_dir = p.parent if p.name == "checkpoints" else p
    return drive(state, build_evaluator(state.config), Path(run_dir))


@dataclass
class ExperimentReport:
    results: list[SeedResult]

    def curves(self) -> dict[str, list[float]]:
        best = np.array([r.best_curve for r in self.results])
        mean = np.array([r.mean_curve for r in self.results])
        return {"best": best.mean(axis=0).tolist(), "mean": mean.mean(axis=0).tolist()}

    def summary(self) -> dict:
        return {
            "seeds": [r.seed for r in self.results],
            "final_best": [r.best_so_far for r in self.results],
            "curves": self.curves(),
        }


def run(config: ExperimentConfig, seeds: list[int] | None = None, output_dir: str | Path | None = None) -> ExperimentReport:
    seeds = seeds if seeds is not None else config.seeds
    out = Path(output_dir if output_dir is not None else config.output_dir)
    evaluator = build_evaluator(config)
    results = []
    for seed in seeds:
        res = run_seed(config, seed, out / f"seed_{seed}", evaluator)
        logger.info("seed %d: best %.4f", seed, res.best_so_far)
        results.append(res)
    report = ExperimentReport(results)
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2))
    return report


@dataclass
class ComparisonReport:
    search: list[SeedResult]
    random: list[SeedResult]
    early_generation: int = 10

    def final_wins(self) -> list[bool]:
        return [s.best_so_far > r.best_so_far for s, r in zip(self.search, self.random)]

    def early_crossings(self) -> list[bool]:
        """Per seed: does the search arm's population mean beat the random
        arm's best of the same generation at some generation <= early_generation?"""
        out = []
        for s, r in zip(self.search, self.random):
            g = min(self.early_generation + 1, len(s.history))
            out.append(any(s.mean_curve[k] > r.best_curve[k] for k in range(g)))
        return out

    def rank_test(self) -> dict:
        from scipy.stats import mannwhitneyu

        a = [s.best_so_far for s in self.search]
        b = [r.best_so_far for r in self.random]
        res = mannwhitneyu(a, b, alternative="greater")
        return {"statistic": float(res.statistic), "p_value": float(res.pvalue)}

    def curves_csv(self) -> str:
        cols = ["generation", "search_best", "search_mean", "random_best", "random_mean"]
        arms = []
        for results in (self.search, self.random):
            arms.append(np.array([r.best_curve for r in results]).mean(axis=0))
            arms.append(np.array([r.mean_curve for r in results]).mean(axis=0))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for g in range(len(arms[0])):
            w.writerow([g] + [f"{a[g]:.10f}" for a in arms])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "seeds": [s.seed for s in self.search],
            "search_final_best": [s.best_so_far for s in self.search],
            "random_final_best": [r.best_so_far for r in self.random],
            "final_wins": sum(self.final_wins()),
            "early_crossings": sum(self.early_crossings()),
            "rank_test": self.rank_test(),
        }


def compare_baseline(config: ExperimentConfig, seeds: list[int], output_dir: str | Path | None = None) -> ComparisonReport:
    """Run the configured search and a constant-fitness random-search arm on
    the same seeds.  Both arms report the surrogate fitness of their members."""
    if len(seeds) < 5:
        raise ConfigError("compare needs at least 5 seeds")
    out = Path(output_dir) if output_dir is not None else None
    search_cfg = config if config.evaluator != "random" else config.replace(evaluator="surrogate")
    random_cfg = config.replace(evaluator="random")
    search_eval, random_eval = build_evaluator(search_cfg), build_evaluator(random_cfg)
    search, rand = [], []
    for seed in seeds:
        search.append(run_seed(search_cfg, seed, out / "search" / f"seed_{seed}" if out else None, search_eval))
        rand.append(run_seed(random_cfg, seed, out / "random" / f"seed_{seed}" if out else None, random_eval))
    report = ComparisonReport(search, rand)
    if out is not None:
        (out / "curves.csv").write_text(report.curves_csv())
        (out / "comparison.json").write_text(json.dumps(report.summary(), indent=2))
    return report
