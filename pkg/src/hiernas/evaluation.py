"""Fitness evaluators for flattened phenotypes.

Evaluators are callables ``evaluator(graph, epochs_hint) -> EvaluationResult``
that hold no mutable state after construction, so members can be scored in
any order or concurrently.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .module_graph import INPUT, OUTPUT, FlatGraph, flat_stats, longest_path

OK = "ok"
CONSTRAINT_VIOLATION = "constraint_violation"
LOOKUP_MISS = "lookup_miss"
FAILED = "failed"

FAILURE_FITNESS = 0.0
MAX_KEY_OPS = 8


@dataclass(frozen=True)
class EvaluationResult:
    fitness: float
    epochs_used: int
    phenotype_stats: tuple[int, int]
    status: str = OK
    reported_fitness: float | None = None  # fitness shown in reports when it differs from the selection fitness
    detail: str | None = None

    @property
    def report(self) -> float:
        return self.fitness if self.reported_fitness is None else self.reported_fitness


def failure(graph: FlatGraph, epochs: int, status: str, detail: str | None = None,
            failure_fitness: float = FAILURE_FITNESS) -> EvaluationResult:
    return EvaluationResult(failure_fitness, epochs, flat_stats(graph), status, None, detail)


class Evaluator(Protocol):
    def __call__(self, graph: FlatGraph, epochs_hint: int) -> EvaluationResult: ...


# ---------------------------------------------------------------- surrogate


@dataclass(frozen=True)
class SurrogateConfig:
    """Parameters of the structural surrogate score.

    ``structural = w_ops * op_score + w_depth * depth_score + w_edges * edge_score``
    (weights normalised to sum to one), where

    * ``op_score`` is the fraction of layer nodes whose label is in
      ``preferred_ops``;
    * ``depth_score = max(0, 1 - ((depth - target_depth) / target_depth) ** 2)``
      with ``depth`` the number of layer nodes on the longest INPUT->OUTPUT path;
    * ``edge_score = min(edges, edge_cap) / edge_cap`` counting terminal edges.

    The returned fitness is ``structural * (1 - 2 ** -epochs)``.
    """

    preferred_ops: tuple[str, ...] = ("conv3_32",)
    target_depth: int = 12
    edge_cap: int = 30
    w_ops: float = 0.4
    w_depth: float = 0.35
    w_edges: float = 0.25


def surrogate_components(graph: FlatGraph, cfg: SurrogateConfig) -> tuple[float, float, float]:
    n = graph.node_count
    op_score = sum(op.label in cfg.preferred_ops for op in graph.nodes) / n
    depth = longest_path(graph)
    depth_score = max(0.0, 1.0 - ((depth - cfg.target_depth) / cfg.target_depth) ** 2)
    edge_score = min(graph.edge_count, cfg.edge_cap) / cfg.edge_cap
    return op_score, depth_score, edge_score


def surrogate_fitness(graph: FlatGraph, epochs: int, cfg: SurrogateConfig = SurrogateConfig()) -> float:
    op_score, depth_score, edge_score = surrogate_components(graph, cfg)
    total = cfg.w_ops + cfg.w_depth + cfg.w_edges
    structural = (cfg.w_ops * op_score + cfg.w_depth * depth_score + cfg.w_edges * edge_score) / total
    return structural * (1.0 - 2.0 ** (-epochs))


@dataclass(frozen=True)
class SurrogateEvaluator:
    config: SurrogateConfig = SurrogateConfig()

    def __call__(self, graph: FlatGraph, epochs_hint: int) -> EvaluationResult:
        if graph.node_count == 0:
            raise ValueError("surrogate needs at least one layer node")
        fit = surrogate_fitness(graph, epochs_hint, self.config)
        return EvaluationResult(fit, epochs_hint, flat_stats(graph))


# ---------------------------------------------------------------- random baseline


@dataclass(frozen=True)
class RandomEvaluator:
    """Control arm: every topology gets the same selection fitness.

    If ``reporter`` is given its fitness is attached as ``reported_fitness``
    so that curves can still be drawn on the true scale.
    """

    constant: float = 0.5
    reporter: Evaluator | None = None

    def __call__(self, graph: FlatGraph, epochs_hint: int) -> EvaluationResult:
        reported = self.reporter(graph, epochs_hint).report if self.reporter is not None else None
        return EvaluationResult(self.constant, epochs_hint, flat_stats(graph), OK, reported)


def evaluate_random(graph: FlatGraph, rng: np.random.Generator | None = None, constant: float = 0.5) -> EvaluationResult:
    # rng is accepted for interface symmetry; the control fitness is constant
    return RandomEvaluator(constant)(graph, 1)


# ---------------------------------------------------------------- cell constraints


@dataclass(frozen=True)
class CellConstraints:
    max_nodes: int = 7
    max_edges: int = 9
    allowed_ops: frozenset[str] = frozenset({"conv1x1", "conv3x3", "maxpool3x3"})
    count_terminals: bool = True

    def __post_init__(self):
        if self.max_nodes < 1 or self.max_edges < 1 or not self.allowed_ops:
            raise ValueError("constraints must be positive and allow at least one op")
        object.__setattr__(self, "allowed_ops", frozenset(self.allowed_ops))


@dataclass(frozen=True)
class Violation:
    kind: str  # "nodes", "edges" or "ops"
    detail: str

    def __bool__(self):
        return False


def check_constraints(graph: FlatGraph, constraints: CellConstraints) -> bool | Violation:
    """True when the cell fits, otherwise the first violated limit."""
    nodes, edges = flat_stats(graph, include_terminals=constraints.count_terminals)
    if nodes > constraints.max_nodes:
        return Violation("nodes", f"{nodes} nodes > {constraints.max_nodes}")
    if edges > constraints.max_edges:
        return Violation("edges", f"{edges} edges > {constraints.max_edges}")
    foreign = sorted({op.label for op in graph.nodes} - constraints.allowed_ops)
    if foreign:
        return Violation("ops", "foreign ops: " + ", ".join(foreign))
    return True


# ---------------------------------------------------------------- cell keys


def _encode(matrix: np.ndarray, ops: list[str], perm: tuple[int, ...]) -> tuple[str, tuple[str, ...]]:
    order = (0, *(p + 1 for p in perm), len(ops) + 1)
    m = matrix[np.ix_(order, order)]
    return "".join(map(str, m.astype(int).ravel())), tuple(ops[p] for p in perm)


@lru_cache(maxsize=None)
def _canonical_key(bits: str, ops: tuple[str, ...]) -> str:
    n = len(ops) + 2
    matrix = np.array([int(b) for b in bits], dtype=np.int8).reshape(n, n)
    best = min(_encode(matrix, list(ops), p) for p in itertools.permutations(range(len(ops))))
    return best[0] + "|" + ",".join(best[1])


def cell_key(matrix, ops: Iterable[str]) -> str:
    """Permutation-invariant key of a cell given its adjacency matrix and the
    labels of its compute nodes.

    ``matrix`` is ``(k+2) x (k+2)`` with row/column 0 the input terminal and
    the last row/column the output terminal.  The key is the
    lexicographically smallest ``"<row-major bits>|<op,op,...>"`` over all
    orderings of the compute nodes.
    """
    ops = tuple(ops)
    if len(ops) > MAX_KEY_OPS:
        raise ValueError(f"cell keys are limited to {MAX_KEY_OPS} compute nodes, got {len(ops)}")
    matrix = np.asarray(matrix, dtype=np.int8)
    n = len(ops) + 2
    if matrix.shape != (n, n):
        raise ValueError(f"matrix shape {matrix.shape} does not match {len(ops)} ops")
    return _canonical_key("".join(map(str, matrix.ravel())), ops)


def graph_matrix(graph: FlatGraph) -> np.ndarray:
    n = graph.node_count + 2
    idx = {INPUT: 0, OUTPUT: n - 1, **{i: i + 1 for i in range(graph.node_count)}}
    m = np.zeros((n, n), dtype=np.int8)
    for s, d in graph.edges:
        m[idx[s], idx[d]] = 1
    return m


def graph_cell_key(graph: FlatGraph) -> str:
    return cell_key(graph_matrix(graph), [op.label for op in graph.nodes])


def parse_cell_key(key: str) -> tuple[np.ndarray, list[str]]:
    """Inverse of :func:`cell_key` (up to the canonical ordering)."""
    try:
        bits, ops_part = key.split("|")
    except ValueError:
        raise ValueError(f"malformed cell key {key!r}") from None
    ops = ops_part.split(",") if ops_part else []
    n = len(ops) + 2
    if len(bits) != n * n or set(bits) - {"0", "1"}:
        raise ValueError(f"malformed adjacency bits in key {key!r}")
    return np.array([int(b) for b in bits], dtype=np.int8).reshape(n, n), ops


def graph_from_cell(matrix, ops: list[str], kinds: dict[str, str] | None = None) -> FlatGraph:
    from .module_graph import LayerOp

    matrix = np.asarray(matrix)
    n = len(ops) + 2
    code = {0: INPUT, n - 1: OUTPUT, **{i + 1: i for i in range(len(ops))}}
    edges = frozenset((code[a], code[b]) for a, b in zip(*np.nonzero(matrix)))
    kinds = kinds or {}
    return FlatGraph(tuple(LayerOp(o, kinds.get(o, "other")) for o in ops), edges)


# ---------------------------------------------------------------- tabular benchmark


class TableLoadError(Exception):
    pass


@dataclass
class BenchmarkTable:
    entries: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    @classmethod
    def load(cls, path: str | Path) -> "BenchmarkTable":
        """Read one JSON record per line: ``{key, validation_accuracy, test_accuracy}``."""
        entries = {}
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise TableLoadError(f"cannot read {path}: {exc}") from exc
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = rec["key"]
                val = float(rec["validation_accuracy"])
                test = float(rec["test_accuracy"])
                matrix, ops = parse_cell_key(key)
            except (ValueError, KeyError, TypeError) as exc:
                raise TableLoadError(f"{path}:{lineno}: {exc}") from exc
            if not (0.0 <= val <= 1.0 and 0.0 <= test <= 1.0):
                raise TableLoadError(f"{path}:{lineno}: accuracy outside [0, 1]")
            if cell_key(matrix, ops) != key:
                raise TableLoadError(f"{path}:{lineno}: key is not in canonical form")
            entries[key] = (val, test)
        return cls(entries)

    def dump(self, path: str | Path):
        with open(path, "w") as fh:
            for key, (val, test) in self.entries.items():
                fh.write(json.dumps({"key": key, "validation_accuracy": val, "test_accuracy": test}) + "\n")


@dataclass(frozen=True)
class TabularEvaluator:
    table: BenchmarkTable
    constraints: CellConstraints = CellConstraints()
    metric: str = "validation"  # or "test"
    failure_fitness: float = FAILURE_FITNESS

    def __call__(self, graph: FlatGraph, epochs_hint: int) -> EvaluationResult:
        verdict = check_constraints(graph, self.constraints)
        if not verdict:
            return failure(graph, 0, CONSTRAINT_VIOLATION, verdict.detail, self.failure_fitness)
        key = graph_cell_key(graph)
        hit = self.table.entries.get(key)
        if hit is None:
            return failure(graph, 0, LOOKUP_MISS, key, self.failure_fitness)
        val, test = hit
        fit = val if self.metric == "validation" else test
        return EvaluationResult(fit, epochs_hint, flat_stats(graph), OK, None, key)


def evaluate_tabular(graph: FlatGraph, table: BenchmarkTable, constraints: CellConstraints) -> EvaluationResult:
    return TabularEvaluator(table, constraints)(graph, 0)


@dataclass(frozen=True)
class ConstrainedEvaluator:
    """Apply cell constraints in front of any other evaluator."""

    inner: Evaluator
    constraints: CellConstraints
    failure_fitness: float = FAILURE_FITNESS

    def __call__(self, graph: FlatGraph, epochs_hint: int) -> EvaluationResult:
        verdict = check_constraints(graph, self.constraints)
        if not verdict:
            return failure(graph, 0, CONSTRAINT_VIOLATION, verdict.detail, self.failure_fitness)
        return self.inner(graph, epochs_hint)


def safe_evaluate(evaluator: Evaluator, graph: FlatGraph, epochs_hint: int,
                  failure_fitness: float = FAILURE_FITNESS) -> EvaluationResult:
    """Run ``evaluator`` turning any exception into a ``failed`` result."""
    try:
        return evaluator(graph, epochs_hint)
    except Exception as exc:  # evaluator faults must not abort a generation
        return failure(graph, epochs_hint, FAILED, f"{type(exc).__name__}: {exc}", failure_fitness)
