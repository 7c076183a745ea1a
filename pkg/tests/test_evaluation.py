import itertools
import json
from importlib import resources

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiernas.evaluation import (
    CONSTRAINT_VIOLATION,
    FAILED,
    LOOKUP_MISS,
    OK,
    BenchmarkTable,
    CellConstraints,
    ConstrainedEvaluator,
    RandomEvaluator,
    SurrogateConfig,
    SurrogateEvaluator,
    TableLoadError,
    TabularEvaluator,
    cell_key,
    check_constraints,
    evaluate_random,
    evaluate_tabular,
    graph_cell_key,
    graph_from_cell,
    graph_matrix,
    parse_cell_key,
    safe_evaluate,
    surrogate_fitness,
)
from hiernas.module_graph import INPUT, OUTPUT, FlatGraph, LayerOp

from oracles import longest_layer_path, paths_exist

NB_OPS = ["conv1x1", "conv3x3", "maxpool3x3"]


def fg(labels, edges):
    return FlatGraph(tuple(LayerOp(x) for x in labels), frozenset(edges))


def chain_graph(labels):
    n = len(labels)
    return fg(labels, [(INPUT, 0), *((i, i + 1) for i in range(n - 1)), (n - 1, OUTPUT)])


def enumerate_cells(k, max_edges=None):
    """All connected DAG cells on k compute nodes in topological labeling."""
    verts = [INPUT, *range(k), OUTPUT]
    pairs = [(verts[a], verts[b]) for a in range(len(verts)) for b in range(a + 1, len(verts))]
    for mask in itertools.product((0, 1), repeat=len(pairs)):
        edges = [p for p, bit in zip(pairs, mask) if bit]
        if max_edges is not None and len(edges) > max_edges:
            continue
        if all(a and b for a, b in paths_exist(k, edges).values()):
            yield edges


# ------------------------------------------------------------------ surrogate


def surrogate_oracle(labels, edges, epochs, cfg):
    n = len(labels)
    ops = sum(1 for x in labels if x in cfg.preferred_ops) / n
    depth = longest_layer_path(n, edges)
    d = 1 - ((depth - cfg.target_depth) / cfg.target_depth) ** 2
    d = d if d > 0 else 0.0
    e = min(len(edges), cfg.edge_cap) / cfg.edge_cap
    w = cfg.w_ops + cfg.w_depth + cfg.w_edges
    return (cfg.w_ops * ops + cfg.w_depth * d + cfg.w_edges * e) / w * (1 - 0.5 ** epochs)


def test_surrogate_matches_exhaustive_enumeration():
    cfg = SurrogateConfig(preferred_ops=("a",), target_depth=3, edge_cap=6)
    best_impl, best_oracle = (-1.0, None), (-1.0, None)
    count = 0
    for k in range(1, 5):
        for edges in enumerate_cells(k):
            for labels in itertools.product("ab", repeat=k):
                g = fg(labels, edges)
                v = surrogate_fitness(g, 3, cfg)
                o = surrogate_oracle(labels, edges, 3, cfg)
                assert v == pytest.approx(o, abs=1e-12)
                if v > best_impl[0]:
                    best_impl = (v, (labels, tuple(edges)))
                if o > best_oracle[0]:
                    best_oracle = (o, (labels, tuple(edges)))
                count += 1
    assert count > 10_000
    assert best_impl == best_oracle
    # the optimum is a composed graph, not a single layer
    assert len(best_impl[1][0]) > 1


def test_surrogate_default_optimum_needs_many_layers():
    cfg = SurrogateConfig()
    singles = [surrogate_fitness(fg([op], e), 10, cfg)
               for op in ("conv3_32", "pool2") for e in ([(INPUT, 0), (0, OUTPUT)], [(INPUT, 0), (0, OUTPUT), (INPUT, OUTPUT)])]
    deep = surrogate_fitness(chain_graph(["conv3_32"] * cfg.target_depth), 10, cfg)
    assert deep > max(singles)


def test_surrogate_relabel_invariance_and_purity():
    a = fg(["x", "y", "z"], [(INPUT, 0), (0, 1), (0, 2), (1, OUTPUT), (2, OUTPUT)])
    b = fg(["z", "x", "y"], [(INPUT, 1), (1, 2), (1, 0), (2, OUTPUT), (0, OUTPUT)])
    ev = SurrogateEvaluator(SurrogateConfig(preferred_ops=("x",)))
    assert ev(a, 4).fitness == ev(b, 4).fitness
    assert ev(a, 4) == ev(a, 4)


def test_surrogate_epochs_factor():
    g = chain_graph(["conv3_32"] * 3)
    assert surrogate_fitness(g, 1) == pytest.approx(0.5 * surrogate_fitness(g, 1000))


# ------------------------------------------------------------------ random control


def test_random_evaluator_constant():
    g1, g2 = chain_graph(["a"]), chain_graph(["b", "c", "d"])
    assert evaluate_random(g1).fitness == evaluate_random(g2).fitness == 0.5
    r = RandomEvaluator(0.5, reporter=SurrogateEvaluator())
    res = r(g2, 3)
    assert res.fitness == 0.5 and res.report == SurrogateEvaluator()(g2, 3).fitness


# ------------------------------------------------------------------ constraints


def test_constraints_accept_seven_nodes_nine_edges():
    edges = [(INPUT, 0), (INPUT, 1), (0, 2), (1, 2), (2, 3), (2, 4), (3, OUTPUT), (4, OUTPUT), (INPUT, OUTPUT)]
    g = fg(["conv1x1", "conv3x3", "maxpool3x3", "conv3x3", "conv1x1"], edges)
    assert check_constraints(g, CellConstraints()) is True


def test_constraints_reject_eighth_node():
    g = chain_graph(["conv3x3"] * 6)
    v = check_constraints(g, CellConstraints())
    assert not v and v.kind == "nodes"
    # without counting terminals six compute nodes fit
    assert check_constraints(g, CellConstraints(count_terminals=False)) is True


def test_constraints_reject_edges_and_ops():
    edges = [(INPUT, 0), (INPUT, 1), (INPUT, 2), (INPUT, 3), (0, OUTPUT), (1, OUTPUT), (2, OUTPUT), (3, OUTPUT),
             (0, 1), (2, 3)]
    v = check_constraints(fg(["conv1x1"] * 4, edges), CellConstraints())
    assert v.kind == "edges"
    v = check_constraints(chain_graph(["conv5x5"]), CellConstraints())
    assert v.kind == "ops"


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 7), st.data())
def test_constraints_monotone(k, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 10_000)))
    from hiernas.evolution import random_dag_edges

    edges = random_dag_edges(k, 0.4, rng)
    labels = [data.draw(st.sampled_from(NB_OPS + ["conv5x5"])) for _ in range(k)]
    g = fg(labels, edges)
    c = CellConstraints()
    bigger_edge = None
    for s in (INPUT, *range(k)):
        for d in (*range(k), OUTPUT):
            if (s, d) not in edges and (s == INPUT or d == OUTPUT or s < d) and s != d:
                bigger_edge = fg(labels, edges | {(s, d)})
                break
        if bigger_edge:
            break
    bigger_node = fg(labels + ["conv1x1"], edges | {(INPUT, k), (k, OUTPUT)})
    if not check_constraints(g, c):
        assert not check_constraints(bigger_node, c)
        if bigger_edge is not None:
            assert not check_constraints(bigger_edge, c)


# ------------------------------------------------------------------ cell keys


def _nx(matrix, ops):
    g = nx.DiGraph()
    n = len(ops) + 2
    labels = ["IN", *ops, "OUT"]
    for i in range(n):
        g.add_node(i, op=labels[i])
    for a, b in zip(*np.nonzero(np.asarray(matrix))):
        g.add_edge(int(a), int(b))
    return g


def _random_cell(k, rng):
    from hiernas.evolution import random_dag_edges

    g = fg([NB_OPS[i] for i in rng.integers(0, 2, k)], random_dag_edges(k, 0.5, rng))
    return graph_matrix(g), [op.label for op in g.nodes]


def test_cell_key_matches_isomorphism_bruteforce():
    rng = np.random.default_rng(0)
    cells = [_random_cell(int(rng.integers(1, 6)), rng) for _ in range(120)]
    keys = [cell_key(m, ops) for m, ops in cells]
    nm = nx.algorithms.isomorphism.categorical_node_match("op", None)
    for i in range(len(cells)):
        for j in range(i + 1, len(cells)):
            if len(cells[i][1]) != len(cells[j][1]):
                continue
            iso = nx.is_isomorphic(_nx(*cells[i]), _nx(*cells[j]), node_match=nm)
            assert (keys[i] == keys[j]) == iso


@pytest.mark.parametrize("seed", range(25))
def test_cell_key_invariant_under_permutation(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 6))
    m, ops = _random_cell(k, rng)
    perm = rng.permutation(k)
    order = [0, *(p + 1 for p in perm), k + 1]
    m2 = m[np.ix_(order, order)]
    ops2 = [ops[p] for p in perm]
    assert cell_key(m, ops) == cell_key(m2, ops2)


def test_parse_cell_key_round_trip():
    m, ops = _random_cell(4, np.random.default_rng(3))
    key = cell_key(m, ops)
    m2, ops2 = parse_cell_key(key)
    assert cell_key(m2, ops2) == key
    assert graph_cell_key(graph_from_cell(m2, ops2)) == key
    with pytest.raises(ValueError):
        parse_cell_key("0101|a")


# ------------------------------------------------------------------ tabular


@pytest.fixture(scope="module")
def sample_table():
    with resources.as_file(resources.files("hiernas.data").joinpath("nasbench_sample.jsonl")) as p:
        return BenchmarkTable.load(p), p.read_text().splitlines()


def test_sample_table_has_500_cells(sample_table):
    table, lines = sample_table
    assert len(table) == 500 == len(lines)


def test_tabular_returns_file_accuracy(sample_table):
    table, lines = sample_table
    for line in lines[:50]:
        rec = json.loads(line)
        g = graph_from_cell(*parse_cell_key(rec["key"]))
        res = evaluate_tabular(g, table, CellConstraints())
        assert res.status == OK and res.fitness == rec["validation_accuracy"]


def test_tabular_format_example(tmp_path):
    g = chain_graph(["conv3x3", "maxpool3x3"])
    key = graph_cell_key(g)
    path = tmp_path / "t.jsonl"
    path.write_text(json.dumps({"key": key, "validation_accuracy": 0.948, "test_accuracy": 0.94}) + "\n")
    table = BenchmarkTable.load(path)
    assert evaluate_tabular(g, table, CellConstraints()).fitness == 0.948
    assert TabularEvaluator(table, metric="test")(g, 1).fitness == 0.94
    miss = evaluate_tabular(chain_graph(["conv1x1"]), table, CellConstraints())
    assert miss.status == LOOKUP_MISS and miss.fitness == 0.0


def test_tabular_over_limit_is_violation(sample_table):
    table, _ = sample_table
    res = evaluate_tabular(chain_graph(["conv3x3"] * 6), table, CellConstraints())
    assert res.status == CONSTRAINT_VIOLATION and res.fitness == 0.0


@pytest.mark.parametrize("line, msg", [
    ('{"key": "0|", "validation_accuracy": 0.5, "test_accuracy": 0.5}', "malformed"),
    ('{"key": "010001000|conv1x1", "validation_accuracy": 1.5, "test_accuracy": 0.5}', "outside"),
    ('{"key": "010001000|conv1x1"}', "validation_accuracy"),
    ("not json", "Expecting"),
])
def test_table_load_errors(tmp_path, line, msg):
    p = tmp_path / "bad.jsonl"
    p.write_text(line + "\n")
    with pytest.raises(TableLoadError, match=msg):
        BenchmarkTable.load(p)


def test_table_rejects_non_canonical_key(tmp_path):
    m, ops = _random_cell(3, np.random.default_rng(8))
    key = cell_key(m, ops)
    bits, oplist = key.split("|")
    # same graph written with a different node order
    n = len(ops) + 2
    mat, _ = parse_cell_key(key)
    order = [0, 3, 2, 1, n - 1]
    alt = "".join(map(str, mat[np.ix_(order, order)].ravel())) + "|" + ",".join(oplist.split(",")[::-1])
    if alt == key:
        pytest.skip("symmetric cell")
    p = tmp_path / "t.jsonl"
    p.write_text(json.dumps({"key": alt, "validation_accuracy": 0.5, "test_accuracy": 0.5}) + "\n")
    with pytest.raises(TableLoadError, match="canonical"):
        BenchmarkTable.load(p)


def test_missing_table_file():
    with pytest.raises(TableLoadError):
        BenchmarkTable.load("/nonexistent/table.jsonl")


def test_constrained_wrapper_and_safe_evaluate():
    ev = ConstrainedEvaluator(SurrogateEvaluator(), CellConstraints(max_nodes=3))
    assert ev(chain_graph(["conv1x1"] * 2), 1).status == CONSTRAINT_VIOLATION
    assert ev(chain_graph(["conv1x1"]), 1).status == OK

    def boom(graph, epochs):
        raise RuntimeError("x")

    res = safe_evaluate(boom, chain_graph(["a"]), 1)
    assert res.status == FAILED and res.fitness == 0.0
