"""Hierarchical module genotype: layer/module references, DAG validity,
recursive flattening into a layer-level phenotype and structural hashing.

A module is a small DAG with two terminals (``INPUT`` and ``OUTPUT``) and a
list of computational nodes.  Every node references either a primitive
layer or another module by id.  Module ids are content hashes, so modules
are immutable values and may be shared freely; "editing" a module always
produces a new module with a new id.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import itertools
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

INPUT = -1
OUTPUT = -2

_TERMINAL_NAMES = {INPUT: "input", OUTPUT: "output"}
_TERMINAL_CODES = {v: k for k, v in _TERMINAL_NAMES.items()}


class GraphError(Exception):
    """Base class for module graph errors."""


class UnresolvedReference(GraphError):
    def __init__(self, module_id: str):
        super().__init__(f"no module registered for id {module_id}")
        self.module_id = module_id


class RecursiveReference(GraphError):
    def __init__(self, module_id: str):
        super().__init__(f"module {module_id} references itself transitively")
        self.module_id = module_id


class OpKind(str, enum.Enum):
    CONVOLUTION = "convolution"
    POOLING = "pooling"
    OTHER = "other"


@dataclass(frozen=True, order=True)
class LayerOp:
    label: str
    kind: OpKind = field(default=OpKind.OTHER, compare=False)  # metadata; labels identify ops

    def __post_init__(self):
        if not self.label:
            raise ValueError("layer label must be non-empty")
        object.__setattr__(self, "kind", OpKind(self.kind))


@dataclass(frozen=True)
class LayerRef:
    op: LayerOp

    @property
    def token(self) -> str:
        return "L:" + self.op.label


@dataclass(frozen=True)
class ModuleRef:
    id: str

    @property
    def token(self) -> str:
        return "M:" + self.id


NodeRef = Union[LayerRef, ModuleRef]
Edge = tuple[int, int]


def _wl_fingerprint(n: int, tokens: Sequence[str], edges: Iterable[Edge]) -> tuple[str, list[str]]:
    """Weisfeiler-Lehman style colouring of a labelled DAG with terminals.

    Returns the graph fingerprint and the per-node colours (index aligned with
    ``tokens``).  Terminals are coloured by their role.
    """
    fingerprint, colours = _wl_cached(n, tuple(tokens), tuple(sorted(edges, key=_edge_sort_key)))
    return fingerprint, list(colours)


@functools.lru_cache(maxsize=4096)
def _wl_cached(n: int, tokens: tuple[str, ...], edges: tuple[Edge, ...]) -> tuple[str, tuple[str, ...]]:
    # out-of-range endpoints only occur in invalid modules; colour them anyway
    extra = sorted({v for e in edges for v in e} - {INPUT, OUTPUT, *range(n)})
    verts = [INPUT, OUTPUT, *range(n), *extra]
    ins: dict[int, list[int]] = {v: [] for v in verts}
    outs: dict[int, list[int]] = {v: [] for v in verts}
    for s, d in edges:
        outs[s].append(d)
        ins[d].append(s)

    def md5(s: str) -> str:
        return hashlib.md5(s.encode("utf-8")).hexdigest()

    colour = {v: md5(f"{len(outs[v])}|{len(ins[v])}|{_label(v, tokens)}") for v in verts}
    for _ in range(n + 2):
        colour = {
            v: md5(
                "".join(sorted(colour[w] for w in ins[v]))
                + "|"
                + "".join(sorted(colour[w] for w in outs[v]))
                + "|"
                + colour[v]
            )
            for v in verts
        }
    fingerprint = hashlib.sha256(str(sorted(colour.values())).encode("utf-8")).hexdigest()
    return fingerprint, tuple(colour[i] for i in range(n))


def _label(v: int, tokens: Sequence[str]) -> str:
    if v in _TERMINAL_NAMES:
        return _TERMINAL_NAMES[v]
    return tokens[v] if 0 <= v < len(tokens) else f"?{v}"


def _topological_order(n: int, edges: Iterable[Edge], key=None) -> list[int] | None:
    """Kahn's algorithm over the computational nodes, ties broken by ``key``.

    Returns None if the graph (terminals included) has a cycle.
    """
    key = key or (lambda i: i)
    verts = [INPUT, OUTPUT, *range(n)]
    indeg = {v: 0 for v in verts}
    succ: dict[int, list[int]] = {v: [] for v in verts}
    for s, d in edges:
        succ[s].append(d)
        indeg[d] += 1
    ready = [v for v in verts if indeg[v] == 0]
    order = []
    while ready:
        # terminals first/last, then by key
        ready.sort(key=lambda v: (0, "") if v == INPUT else (2, "") if v == OUTPUT else (1, key(v)))
        v = ready.pop(0)
        order.append(v)
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                ready.append(w)
    if len(order) != len(verts):
        return None
    return [v for v in order if v >= 0]


def canonical_order(nodes: Sequence[NodeRef], edges: Iterable[Edge]) -> list[int]:
    """Topological order of the computational nodes with a relabeling-invariant
    tie-break (node colour, then reference token)."""
    edges = list(edges)
    tokens = [r.token for r in nodes]
    _, colours = _wl_fingerprint(len(nodes), tokens, edges)
    order = _topological_order(len(nodes), edges, key=lambda i: (colours[i], tokens[i]))
    if order is None:
        raise GraphError("graph has a directed cycle")
    return order


_MAX_TIE_ORDERS = 720


def _canonical_form(nodes: tuple[NodeRef, ...], edges: frozenset[Edge]) -> tuple[tuple[NodeRef, ...], frozenset[Edge]]:
    """Relabel nodes into canonical topological order.

    Nodes with equal (colour, token) keys are tried in every arrangement and
    the one with the smallest relabelled edge list wins.  Invalid modules are
    returned untouched so violations keep their original indices.
    """
    n = len(nodes)
    if n == 0 or not _structurally_valid(n, edges):
        return nodes, edges
    tokens = [r.token for r in nodes]
    _, colours = _wl_fingerprint(n, tokens, edges)
    key = [(colours[i], tokens[i]) for i in range(n)]
    base = _topological_order(n, edges, key=lambda i: key[i])

    groups: list[list[int]] = []  # runs of equal keys in ``base``
    for v in base:
        if groups and key[groups[-1][0]] == key[v]:
            groups[-1].append(v)
        else:
            groups.append([v])
    arrangements = [list(itertools.permutations(g)) for g in groups]
    total = 1
    for a in arrangements:
        total *= len(a)
    candidates = itertools.product(*arrangements) if total <= _MAX_TIE_ORDERS else [tuple(map(tuple, groups))]

    best = None
    for combo in candidates:
        order = [v for g in combo for v in g]
        pos = {old: new for new, old in enumerate(order)}
        pos[INPUT], pos[OUTPUT] = INPUT, OUTPUT
        relabelled = sorted((pos[a], pos[b]) for a, b in edges)
        if any(a >= 0 and b >= 0 and a >= b for a, b in relabelled):
            continue
        if best is None or relabelled < best[0]:
            best = (relabelled, order)
    relabelled, order = best
    return tuple(nodes[i] for i in order), frozenset(relabelled)


def _structurally_valid(n: int, edges: frozenset[Edge]) -> bool:
    valid = {INPUT, OUTPUT, *range(n)}
    for s, d in edges:
        if s not in valid or d not in valid or d == INPUT or s == OUTPUT or s == d:
            return False
    if _topological_order(n, edges) is None:
        return False
    fwd, bwd = _reach(edges, INPUT, True), _reach(edges, OUTPUT, False)
    return all(i in fwd and i in bwd for i in range(n))


def compute_id(nodes: Sequence[NodeRef], edges: Iterable[Edge]) -> str:
    tokens = [r.token for r in nodes]
    fingerprint, _ = _wl_fingerprint(len(nodes), tokens, list(edges))
    return fingerprint[:32]


@dataclass(frozen=True)
class ModuleDef:
    """Immutable module genotype.

    ``edges`` hold pairs over ``INPUT`` (-1), ``OUTPUT`` (-2) and node indices.
    The id is derived from content; use :meth:`build` rather than the
    constructor when creating modules by hand.
    """

    nodes: tuple[NodeRef, ...]
    edges: frozenset[Edge]
    id: str = field(default="", compare=False)

    @classmethod
    def build(cls, nodes: Sequence[NodeRef], edges: Iterable[Edge]) -> "ModuleDef":
        """Create a module with its id; valid modules are stored in canonical
        node order so that equal ids always mean equal representations."""
        nodes = tuple(nodes)
        edges = frozenset((int(s), int(d)) for s, d in edges)
        nodes, edges = _canonical_form(nodes, edges)
        return cls(nodes, edges, compute_id(nodes, edges))

    def __eq__(self, other):
        return isinstance(other, ModuleDef) and self.id == other.id

    def __hash__(self):
        return hash(self.id)

    def with_node(self, index: int, ref: NodeRef) -> "ModuleDef":
        nodes = list(self.nodes)
        nodes[index] = ref
        return ModuleDef.build(nodes, self.edges)

    def with_edge(self, edge: Edge) -> "ModuleDef":
        return ModuleDef.build(self.nodes, self.edges | {edge})

    def child_ids(self) -> list[str]:
        return [r.id for r in self.nodes if isinstance(r, ModuleRef)]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "nodes": [
                {"layer": r.op.label, "kind": r.op.kind.value} if isinstance(r, LayerRef) else {"module": r.id}
                for r in self.nodes
            ],
            "edges": [[_endpoint_name(s), _endpoint_name(d)] for s, d in sorted(self.edges, key=_edge_sort_key)],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModuleDef":
        nodes: list[NodeRef] = []
        for n in data["nodes"]:
            if "layer" in n:
                nodes.append(LayerRef(LayerOp(n["layer"], n.get("kind", "other"))))
            else:
                nodes.append(ModuleRef(n["module"]))
        edges = [(_endpoint_code(s), _endpoint_code(d)) for s, d in data["edges"]]
        module = cls.build(nodes, edges)
        if "id" in data and data["id"] != module.id:
            raise GraphError(f"module id mismatch: stored {data['id']}, computed {module.id}")
        return module


def _endpoint_name(v: int):
    return _TERMINAL_NAMES.get(v, v)


def _endpoint_code(v) -> int:
    if isinstance(v, str):
        return _TERMINAL_CODES[v]
    return int(v)


def single_layer_module(op: LayerOp) -> ModuleDef:
    return ModuleDef.build([LayerRef(op)], [(INPUT, 0), (0, OUTPUT)])


def is_single_layer(module: ModuleDef) -> bool:
    return (
        len(module.nodes) == 1
        and isinstance(module.nodes[0], LayerRef)
        and module.edges == frozenset({(INPUT, 0), (0, OUTPUT)})
    )


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    violation: str | None = None
    detail: object = None

    def __bool__(self):
        return self.ok


OK = ValidationResult(True)


def validate(module: ModuleDef, resolver: Mapping[str, ModuleDef] | None = None) -> ValidationResult:
    """Check the module invariants, returning the first violation found.

    Violation kinds: ``empty``, ``endpoint``, ``input_incoming``,
    ``output_outgoing``, ``cycle``, ``connectivity``, ``unresolved``,
    ``recursive_reference``.  The reference checks only run when a
    resolver is supplied.
    """
    n = len(module.nodes)
    if n == 0:
        return ValidationResult(False, "empty", None)
    valid = {INPUT, OUTPUT, *range(n)}
    for e in sorted(module.edges):
        s, d = e
        if s not in valid or d not in valid:
            return ValidationResult(False, "endpoint", e)
        if d == INPUT:
            return ValidationResult(False, "input_incoming", e)
        if s == OUTPUT:
            return ValidationResult(False, "output_outgoing", e)
        if s == d:
            return ValidationResult(False, "cycle", e)

    cyc = _find_cycle_edge(n, module.edges)
    if cyc is not None:
        return ValidationResult(False, "cycle", cyc)

    fwd = _reach(module.edges, INPUT, forward=True)
    bwd = _reach(module.edges, OUTPUT, forward=False)
    for i in range(n):
        if i not in fwd or i not in bwd:
            return ValidationResult(False, "connectivity", i)

    if resolver is not None:
        try:
            _check_references(module, resolver, [])
        except UnresolvedReference as exc:
            return ValidationResult(False, "unresolved", exc.module_id)
        except RecursiveReference as exc:
            return ValidationResult(False, "recursive_reference", exc.module_id)
    return OK


def _check_references(module: ModuleDef, resolver, stack: list[str], done: set | None = None):
    done = set() if done is None else done
    if module.id in stack:
        raise RecursiveReference(module.id)
    if module.id in done:
        return
    stack.append(module.id)
    for cid in module.child_ids():
        _check_references(_resolve(resolver, cid), resolver, stack, done)
    stack.pop()
    done.add(module.id)


def _find_cycle_edge(n: int, edges: Iterable[Edge]) -> Edge | None:
    """Return an edge closing a directed cycle (back edge of a DFS), if any."""
    succ: dict[int, list[int]] = {}
    for s, d in sorted(edges):
        succ.setdefault(s, []).append(d)
    state: dict[int, int] = {}
    for root in [INPUT, *range(n), OUTPUT]:
        if state.get(root):
            continue
        stack = [(root, iter(succ.get(root, ())))]
        state[root] = 1
        while stack:
            v, it = stack[-1]
            for w in it:
                if state.get(w) == 1:
                    return (v, w)
                if not state.get(w):
                    state[w] = 1
                    stack.append((w, iter(succ.get(w, ()))))
                    break
            else:
                state[v] = 2
                stack.pop()
    return None


def _reach(edges: Iterable[Edge], start: int, forward: bool) -> set[int]:
    adj: dict[int, list[int]] = {}
    for s, d in edges:
        a, b = (s, d) if forward else (d, s)
        adj.setdefault(a, []).append(b)
    seen = {start}
    todo = [start]
    while todo:
        v = todo.pop()
        for w in adj.get(v, ()):
            if w not in seen:
                seen.add(w)
                todo.append(w)
    return seen


def _resolve(resolver: Mapping[str, ModuleDef], module_id: str) -> ModuleDef:
    try:
        return resolver[module_id]
    except KeyError:
        raise UnresolvedReference(module_id) from None


# ---------------------------------------------------------------- flattening


@dataclass(frozen=True)
class FlatGraph:
    """Layer-only phenotype.

    Nodes are indexed ``0..len(nodes)-1`` in expansion order; edges may use
    the ``INPUT``/``OUTPUT`` terminal codes.
    """

    nodes: tuple[LayerOp, ...]
    edges: frozenset[Edge]

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def canonical(self) -> "FlatGraph":
        """Relabel nodes into canonical topological order."""
        refs = [LayerRef(op) for op in self.nodes]
        order = canonical_order(refs, self.edges)
        pos = {old: new for new, old in enumerate(order)}
        pos[INPUT], pos[OUTPUT] = INPUT, OUTPUT
        return FlatGraph(
            tuple(self.nodes[i] for i in order),
            frozenset((pos[s], pos[d]) for s, d in self.edges),
        )

    def to_dict(self) -> dict:
        g = self.canonical()
        return {
            "nodes": [{"id": i, "op": op.label, "kind": op.kind.value} for i, op in enumerate(g.nodes)],
            "edges": [[_endpoint_name(s), _endpoint_name(d)] for s, d in sorted(g.edges, key=_edge_sort_key)],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FlatGraph":
        nodes = tuple(LayerOp(n["op"], n.get("kind", "other")) for n in sorted(data["nodes"], key=lambda n: n["id"]))
        edges = frozenset((_endpoint_code(s), _endpoint_code(d)) for s, d in data["edges"])
        return cls(nodes, edges)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_dot(self, name: str = "phenotype") -> str:
        g = self.canonical()
        lines = [f"digraph {_dot_id(name)} {{", "  rankdir=TB;", '  input [label="INPUT", shape=box];']
        for i, op in enumerate(g.nodes):
            lines.append(f'  n{i} [label="{op.label}"];')
        lines.append('  output [label="OUTPUT", shape=box];')
        for s, d in sorted(g.edges, key=_edge_sort_key):
            lines.append(f"  {_dot_vertex(s)} -> {_dot_vertex(d)};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def _edge_sort_key(e: Edge):
    def k(v):
        return -1 if v == INPUT else 10**9 if v == OUTPUT else v

    return (k(e[0]), k(e[1]))


def _dot_vertex(v: int) -> str:
    return _TERMINAL_NAMES.get(v) or f"n{v}"


def _dot_id(name: str) -> str:
    return '"' + name.replace('"', r"\"") + '"'


def flatten(module: ModuleDef, resolver: Mapping[str, ModuleDef]) -> FlatGraph:
    """Expand every module reference recursively into a layer-only graph.

    Each occurrence of a child is expanded independently; the child's
    terminals become wiring between the referencing node's predecessors and
    successors.
    """
    return _flatten(module, resolver, [], {})


def _flatten(module, resolver, stack, memo) -> FlatGraph:
    if module.id in memo:
        return memo[module.id]
    if module.id in stack:
        raise RecursiveReference(module.id)
    stack.append(module.id)

    layers: list[LayerOp] = []
    entry: dict[int, list[int]] = {}  # node -> flat vertices fed by node's inputs
    exit_: dict[int, list[int]] = {}  # node -> flat vertices feeding node's outputs
    through: set[int] = set()  # nodes whose expansion has a direct input->output path
    edges: set[Edge] = set()
    for i, ref in enumerate(module.nodes):
        if isinstance(ref, LayerRef):
            layers.append(ref.op)
            entry[i] = exit_[i] = [len(layers) - 1]
            continue
        child = _flatten(_resolve(resolver, ref.id), resolver, stack, memo)
        off = len(layers)
        layers.extend(child.nodes)
        shift = {INPUT: INPUT, OUTPUT: OUTPUT, **{k: k + off for k in range(len(child.nodes))}}
        entry[i] = [shift[d] for s, d in child.edges if s == INPUT and d != OUTPUT]
        exit_[i] = [shift[s] for s, d in child.edges if d == OUTPUT and s != INPUT]
        if (INPUT, OUTPUT) in child.edges:
            through.add(i)
        edges.update((shift[s], shift[d]) for s, d in child.edges if s >= 0 and d >= 0)

    # sources(v): flat vertices whose outputs flow out of endpoint v
    def sources(v: int) -> list[int]:
        if v == INPUT:
            return [INPUT]
        out = list(exit_[v])
        if v in through:
            for s, d in module.edges:
                if d == v:
                    out.extend(sources(s))
        return out

    def sinks(v: int) -> list[int]:
        if v == OUTPUT:
            return [OUTPUT]
        out = list(entry[v])
        if v in through:
            for s, d in module.edges:
                if s == v:
                    out.extend(sinks(d))
        return out

    for s, d in module.edges:
        for a in sources(s):
            for b in sinks(d):
                edges.add((a, b))

    stack.pop()
    result = FlatGraph(tuple(layers), frozenset(edges))
    memo[module.id] = result
    return result


def canonical_hash(module: ModuleDef, resolver: Mapping[str, ModuleDef] | None = None) -> str:
    """Structural id of ``module``.

    Children contribute through their own ids, so hashing is bottom-up by
    construction.  With a resolver, reference cycles raise
    :class:`RecursiveReference`.
    """
    if resolver is not None:
        _check_references(module, resolver, [])
    return compute_id(module.nodes, module.edges)


def complexity(module: ModuleDef) -> int:
    """Number of computational nodes in the module's own graph."""
    return len(module.nodes)


def flat_stats(graph: FlatGraph, include_terminals: bool = False) -> tuple[int, int]:
    """(node_count, edge_count).  Edges always include terminal wiring;
    ``include_terminals`` adds INPUT and OUTPUT to the node count."""
    return graph.node_count + (2 if include_terminals else 0), graph.edge_count


def longest_path(graph: FlatGraph) -> int:
    """Number of layer nodes on the longest INPUT->OUTPUT path."""
    order = _topological_order(graph.node_count, graph.edges)
    if order is None:
        raise GraphError("graph has a directed cycle")
    pred: dict[int, list[int]] = {}
    for s, d in graph.edges:
        pred.setdefault(d, []).append(s)
    depth = {INPUT: 0}
    for v in order:
        depth[v] = 1 + max((depth[p] for p in pred.get(v, ())), default=0)
    return max((depth[p] for p in pred.get(OUTPUT, ())), default=0)


# ---------------------------------------------------------------- hierarchy


def walk(module: ModuleDef, resolver: Mapping[str, ModuleDef]):
    """Yield every module occurrence of the expanded reference tree, root first."""
    stack = [module]
    while stack:
        m = stack.pop()
        yield m
        for cid in reversed(m.child_ids()):
            stack.append(_resolve(resolver, cid))


def hierarchy_summary(module: ModuleDef, resolver: Mapping[str, ModuleDef]) -> dict:
    """Module and layer counts, both by distinct id and by occurrence."""
    occurrences = Counter(m.id for m in walk(module, resolver))
    flat = flatten(module, resolver)
    layer_counts = Counter(op.label for op in flat.nodes)
    return {
        "distinct_modules": len(occurrences),
        "module_occurrences": sum(occurrences.values()),
        "distinct_layers": len(layer_counts),
        "layer_occurrences": sum(layer_counts.values()),
        "flat_nodes": flat.node_count,
        "flat_edges": flat.edge_count,
    }


def hierarchy_to_dot(module: ModuleDef, resolver: Mapping[str, ModuleDef], name: str = "hierarchy") -> str:
    """DOT text with one cluster per distinct module in the hierarchy."""
    seen: dict[str, ModuleDef] = {}
    for m in walk(module, resolver):
        seen.setdefault(m.id, m)
    lines = [f"digraph {_dot_id(name)} {{", "  compound=true;"]
    for k, (mid, m) in enumerate(seen.items()):
        p = f"m{k}_"
        lines.append(f"  subgraph cluster_{k} {{")
        lines.append(f'    label="{mid[:8]}";')
        lines.append(f'    {p}input [label="INPUT", shape=box];')
        for i, ref in enumerate(m.nodes):
            label = ref.op.label if isinstance(ref, LayerRef) else "module " + ref.id[:8]
            shape = "ellipse" if isinstance(ref, LayerRef) else "component"
            lines.append(f'    {p}n{i} [label="{label}", shape={shape}];')
        lines.append(f'    {p}output [label="OUTPUT", shape=box];')
        for s, d in sorted(m.edges, key=_edge_sort_key):
            lines.append(f"    {p}{_dot_vertex(s)} -> {p}{_dot_vertex(d)};")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"
