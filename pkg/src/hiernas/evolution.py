"""Generational loop over a population of hierarchical modules.

No crossover is used.  Each generation evaluates new or mutated members,
shares every member's fitness with all modules in its hierarchy, settles
the candidate list, replaces the worst members with freshly generated
modules and finally gives every survivor one chance to mutate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .evaluation import EvaluationResult, Evaluator, safe_evaluate, FAILURE_FITNESS
from .module_graph import (
    INPUT,
    OUTPUT,
    LayerRef,
    ModuleDef,
    ModuleRef,
    NodeRef,
    complexity,
    flatten,
    is_single_layer,
    validate,
)
from .registry import ListsState

logger = logging.getLogger(__name__)

NODE_MUTATION = "node"
EDGE_MUTATION = "edge"
NO_MUTATION = None


@dataclass
class EvolutionConfig:
    population_size: int = 20
    notable_max: int = 10
    base_ttl: int = 4
    min_observations: int = 2
    replace_fraction: float = 0.4
    p_node_mut: float = 0.15
    p_edge_mut: float = 0.55
    gen_graph_nodes: int | tuple[int, int] = 2
    p_edge_gen: float = 0.5
    max_epochs: int = 10
    edge_retries: int = 10
    prior_fitness: float = 0.5
    failure_fitness: float = FAILURE_FITNESS
    count_per_occurrence: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if isinstance(self.gen_graph_nodes, list):
            self.gen_graph_nodes = tuple(self.gen_graph_nodes)
        self.validate()

    def validate(self):
        counts = ["population_size", "notable_max", "base_ttl", "min_observations", "max_epochs", "edge_retries"]
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.replace_fraction <= 1.0:
            raise ValueError("replace_fraction must lie in [0, 1]")
        if self.p_node_mut < 0 or self.p_edge_mut < 0 or self.p_node_mut + self.p_edge_mut > 1:
            raise ValueError("mutation probabilities must be non-negative and sum to at most 1")
        if not 0.0 <= self.p_edge_gen <= 1.0:
            raise ValueError("p_edge_gen must lie in [0, 1]")
        lo, hi = self.node_range
        if lo < 1 or hi < lo:
            raise ValueError("gen_graph_nodes must be >= 1")

    @property
    def node_range(self) -> tuple[int, int]:
        g = self.gen_graph_nodes
        return (g, g) if isinstance(g, int) else (int(g[0]), int(g[1]))

    def draw_nodes(self, rng: np.random.Generator) -> int:
        lo, hi = self.node_range
        return lo if lo == hi else int(rng.integers(lo, hi + 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["gen_graph_nodes"], tuple):
            d["gen_graph_nodes"] = list(d["gen_graph_nodes"])
        return d


@dataclass
class PopulationMember:
    root: ModuleDef
    fitness: float | None = None
    dirty: bool = True
    age: int = 0
    reported_fitness: float | None = None
    status: str | None = None

    @property
    def report(self) -> float | None:
        return self.fitness if self.reported_fitness is None else self.reported_fitness

    def to_dict(self) -> dict:
        return {"root": self.root.id, "fitness": self.fitness, "dirty": self.dirty, "age": self.age,
                "reported_fitness": self.reported_fitness, "status": self.status}


@dataclass
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float
    notable_size: int
    candidate_size: int
    banned_size: int
    promotions: int
    bans: int
    evaluations: int

    CSV_COLUMNS = ("generation", "best_fitness", "mean_fitness", "notable_size", "candidate_size",
                   "banned_size", "promotions", "bans", "evaluations")

    def csv_row(self) -> list[str]:
        return [str(self.generation), f"{self.best_fitness:.10f}", f"{self.mean_fitness:.10f}",
                str(self.notable_size), str(self.candidate_size), str(self.banned_size),
                str(self.promotions), str(self.bans), str(self.evaluations)]


# ---------------------------------------------------------------- epochs


def training_epochs(complexity: int, generation: int, max_epochs: int) -> int:
    """Training budget hint: ``max(1, min(floor(c / max(ln(g + 1), 1)), max_epochs))``."""
    if complexity < 1 or generation < 0 or max_epochs < 1:
        raise ValueError("complexity >= 1, generation >= 0 and max_epochs >= 1 required")
    quotient = math.floor(complexity / max(math.log(generation + 1), 1.0))
    return max(1, min(quotient, max_epochs))


# ---------------------------------------------------------------- generation


def random_dag_edges(n: int, p_edge: float, rng: np.random.Generator) -> set[tuple[int, int]]:
    """Random DAG over ``n`` nodes wired between INPUT and OUTPUT.

    Nodes are placed in a random order and every forward pair is joined
    with probability ``p_edge``.  Nodes left without inputs are fed from
    INPUT; nodes left without outputs feed OUTPUT.
    """
    order = rng.permutation(n)
    edges = set()
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < p_edge:
                edges.add((int(order[a]), int(order[b])))
    has_in = {d for _, d in edges}
    has_out = {s for s, _ in edges}
    for v in range(n):
        if v not in has_in:
            edges.add((INPUT, v))
        if v not in has_out:
            edges.add((v, OUTPUT))
    return edges


def node_for(module_id: str, state: ListsState) -> NodeRef:
    """Node reference for a sampled notable: seed layer modules collapse to the layer itself."""
    module = state.module_store[module_id]
    if is_single_layer(module):
        return module.nodes[0]
    return ModuleRef(module_id)


def generate_module(state: ListsState, n_nodes: int, rng: np.random.Generator, p_edge_gen: float = 0.5) -> ModuleDef:
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    picks = state.sample_notables(n_nodes, rng)
    nodes = [node_for(mid, state) for mid in picks]
    module = ModuleDef.build(nodes, random_dag_edges(n_nodes, p_edge_gen, rng))
    return state.add_module(module)


# ---------------------------------------------------------------- mutation


def mutate_node(module: ModuleDef, state: ListsState, rng: np.random.Generator, config: EvolutionConfig) -> ModuleDef:
    """Swap one layer leaf for a freshly generated module, descending through
    module references until a layer is reached."""
    i = int(rng.integers(len(module.nodes)))
    ref = module.nodes[i]
    if isinstance(ref, LayerRef):
        child = generate_module(state, config.draw_nodes(rng), rng, config.p_edge_gen)
    else:
        child = mutate_node(state.module_store[ref.id], state, rng, config)
    return state.add_module(module.with_node(i, ModuleRef(child.id)))


def legal_new_edge(module: ModuleDef, edge: tuple[int, int]) -> bool:
    s, d = edge
    if s == d or edge in module.edges or s == OUTPUT or d == INPUT:
        return False
    if s == INPUT or d == OUTPUT:
        return True
    # adding s->d closes a cycle iff s is reachable from d
    succ: dict[int, list[int]] = {}
    for a, b in module.edges:
        succ.setdefault(a, []).append(b)
    todo, seen = [d], {d}
    while todo:
        v = todo.pop()
        if v == s:
            return False
        for w in succ.get(v, ()):
            if w not in seen:
                seen.add(w)
                todo.append(w)
    return True


def mutate_edge(module: ModuleDef, state: ListsState, rng: np.random.Generator, retries: int = 10) -> ModuleDef:
    """Add one acyclic edge either here or, recursively, inside a referenced child.

    Returns ``module`` itself when no legal edge turned up within ``retries``
    draws.
    """
    children = [i for i, r in enumerate(module.nodes) if isinstance(r, ModuleRef)]
    if children and rng.random() < 0.5:
        i = children[int(rng.integers(len(children)))]
        old = state.module_store[module.nodes[i].id]
        new = mutate_edge(old, state, rng, retries)
        if new.id == old.id:
            return module
        return state.add_module(module.with_node(i, ModuleRef(new.id)))

    n = len(module.nodes)
    sources = [INPUT, *range(n)]
    targets = [*range(n), OUTPUT]
    for _ in range(retries):
        edge = (sources[int(rng.integers(n + 1))], targets[int(rng.integers(n + 1))])
        if legal_new_edge(module, edge):
            return state.add_module(module.with_edge(edge))
    return module


def draw_mutation(rng: np.random.Generator, config: EvolutionConfig) -> str | None:
    s = rng.random()
    return mutation_kind(s, config)


def mutation_kind(s: float, config: EvolutionConfig) -> str | None:
    if s < config.p_node_mut:
        return NODE_MUTATION
    # 0.15 + 0.55 must be exactly 0.7 for the boundary draw
    if s < round(config.p_node_mut + config.p_edge_mut, 12):
        return EDGE_MUTATION
    return NO_MUTATION


def mutate(member: PopulationMember, state: ListsState, rng: np.random.Generator,
           config: EvolutionConfig) -> PopulationMember:
    """Apply at most one mutation; unchanged members keep their fitness."""
    kind = draw_mutation(rng, config)
    if kind == NODE_MUTATION:
        root = mutate_node(member.root, state, rng, config)
    elif kind == EDGE_MUTATION:
        root = mutate_edge(member.root, state, rng, config.edge_retries)
    else:
        root = member.root
    if root.id == member.root.id:
        return member
    return PopulationMember(root, None, True, member.age)


# ---------------------------------------------------------------- fitness sharing


def hierarchy_ids(root: ModuleDef, state: ListsState, per_occurrence: bool = False) -> list[str]:
    """Ids of every module in ``root``'s hierarchy, root first.

    Layer leaves map to their seed single-layer module.  With
    ``per_occurrence`` repeated references are listed once per occurrence.
    """
    out: list[str] = []
    seen: set[str] = set()
    stack: list[ModuleDef | str] = [root]
    while stack:
        item = stack.pop()
        if isinstance(item, str):
            mid, children = item, ()
        else:
            mid, children = item.id, item.nodes
        if not per_occurrence:
            if mid in seen:
                continue
            seen.add(mid)
        out.append(mid)
        for ref in reversed(children):
            if isinstance(ref, LayerRef):
                lid = state.layer_ids.get(ref.op.label)
                if lid is not None:
                    stack.append(lid)
            else:
                stack.append(state.module_store[ref.id])
    return out


def propagate_fitness(member: PopulationMember, fitness: float, state: ListsState,
                      per_occurrence: bool = False) -> list[str]:
    ids = hierarchy_ids(member.root, state, per_occurrence)
    for mid in ids:
        state.record_fitness(mid, fitness)
    return ids


# ---------------------------------------------------------------- loop


def evaluate_member(member: PopulationMember, state: ListsState, evaluator: Evaluator, generation: int,
                    config: EvolutionConfig) -> EvaluationResult:
    graph = flatten(member.root, state.module_store)
    epochs = training_epochs(complexity(member.root), generation, config.max_epochs)
    return safe_evaluate(evaluator, graph, epochs, config.failure_fitness)


def initial_population(state: ListsState, config: EvolutionConfig, rng: np.random.Generator) -> list[PopulationMember]:
    return [PopulationMember(generate_module(state, config.draw_nodes(rng), rng, config.p_edge_gen))
            for _ in range(config.population_size)]


def replacement_count(population_size: int, replace_fraction: float) -> int:
    # guard against 0.4 * 20 = 8.000000000000002 style round-up
    return math.ceil(round(replace_fraction * population_size, 9))


def replacement_order(population: Sequence[PopulationMember]) -> list[int]:
    """Member indices from worst to best: fitness, then older first, then digest."""
    return sorted(range(len(population)),
                  key=lambda k: (population[k].fitness, -population[k].age, population[k].root.id))


@dataclass
class StepRecord:
    """Per-generation detail kept for tests and diagnostics."""

    evaluated: list[int] = field(default_factory=list)
    replaced: list[int] = field(default_factory=list)
    mutations: list[str | None] = field(default_factory=list)
    promotions: list[str] = field(default_factory=list)
    bans: list[str] = field(default_factory=list)
    results: dict[int, EvaluationResult] = field(default_factory=dict)


def step_generation(population: list[PopulationMember], state: ListsState, evaluator: Evaluator,
                    config: EvolutionConfig, rng: np.random.Generator, generation: int,
                    record: StepRecord | None = None) -> tuple[list[PopulationMember], GenerationStats]:
    """Run one generation and return the next population with its stats.

    ``state`` is updated in place.  The stats describe the population as
    evaluated in this generation (before replacement and mutation).
    """
    if not population:
        raise ValueError("population is empty")
    record = record if record is not None else StepRecord()

    # (1) evaluate new/mutated members; (2) share fitness in member order
    evaluated = [k for k, m in enumerate(population) if m.dirty or m.fitness is None]
    for k in evaluated:
        res = evaluate_member(population[k], state, evaluator, generation, config)
        m = population[k]
        m.fitness, m.reported_fitness, m.status, m.dirty = res.fitness, res.reported_fitness, res.status, False
        record.results[k] = res
    for k in evaluated:
        propagate_fitness(population[k], population[k].fitness, state, config.count_per_occurrence)
    record.evaluated = evaluated

    reports = np.array([m.report for m in population], dtype=float)

    # (3) settle candidates
    outcome = state.end_of_generation(config.min_observations, config.notable_max)
    record.promotions, record.bans = outcome.promotions, outcome.bans

    stats = GenerationStats(
        generation=generation,
        best_fitness=float(reports.max()),
        mean_fitness=float(reports.mean()),
        notable_size=len(state.notable),
        candidate_size=len(state.candidate),
        banned_size=len(state.banned),
        promotions=len(outcome.promotions),
        bans=len(outcome.bans),
        evaluations=len(evaluated),
    )

    # (4) replace the worst fraction
    n_replace = replacement_count(len(population), config.replace_fraction)
    worst = replacement_order(population)[:n_replace]
    record.replaced = sorted(worst)
    nxt = list(population)
    for k in sorted(worst):
        nxt[k] = None  # type: ignore[call-overload]

    # (5) mutate survivors; fresh members are evaluated before they mutate
    for k, m in enumerate(nxt):
        if m is None:
            root = generate_module(state, config.draw_nodes(rng), rng, config.p_edge_gen)
            nxt[k] = PopulationMember(root)
            record.mutations.append(None)
            continue
        m.age += 1
        new = mutate(m, state, rng, config)
        record.mutations.append(None if new is m else "mutated")
        nxt[k] = new
    logger.debug("generation %d: best %.4f mean %.4f", generation, stats.best_fitness, stats.mean_fitness)
    return nxt, stats


def check_population(population: Sequence[PopulationMember], state: ListsState):
    for m in population:
        res = validate(m.root, state.module_store)
        if not res:
            raise AssertionError(f"invalid member {m.root.id}: {res}")
