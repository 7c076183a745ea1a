"""Independent reference implementations used as test oracles.

Nothing here calls into the code paths it is used to check.
"""

import itertools
import math

IN, OUT = -1, -2


def is_acyclic_bruteforce(vertices, edges):
    """True iff some ordering of ``vertices`` puts every edge forward.

    Exhaustive over permutations; keep ``len(vertices)`` small.
    """
    vertices = list(vertices)
    for perm in itertools.permutations(vertices):
        pos = {v: i for i, v in enumerate(perm)}
        if all(pos[s] < pos[d] for s, d in edges):
            return True
    return False


def has_cycle_by_reachability(vertices, edges):
    """An edge u->v lies on a cycle iff u is reachable from v."""
    succ = {v: [] for v in vertices}
    for s, d in edges:
        succ[s].append(d)
    for s, d in edges:
        seen, todo = {d}, [d]
        while todo:
            x = todo.pop()
            if x == s:
                return True
            for y in succ[x]:
                if y not in seen:
                    seen.add(y)
                    todo.append(y)
    return False


def paths_exist(n, edges):
    """For each compute node: (reachable from IN, reaches OUT), via Warshall closure."""
    verts = [IN, OUT, *range(n)]
    reach = {(a, b): False for a in verts for b in verts}
    for s, d in edges:
        reach[(s, d)] = True
    for k in verts:
        for a in verts:
            if reach[(a, k)]:
                for b in verts:
                    if reach[(k, b)]:
                        reach[(a, b)] = True
    return {i: (reach[(IN, i)], reach[(i, OUT)]) for i in range(n)}


def module_is_valid(n, edges):
    if n == 0:
        return False
    verts = [IN, OUT, *range(n)]
    for s, d in edges:
        if s not in verts or d not in verts or d == IN or s == OUT or s == d:
            return False
    if not is_acyclic_bruteforce(verts, edges):
        return False
    return all(a and b for a, b in paths_exist(n, edges).values())


def count_leaves(module, store):
    """Leaf layer occurrences in the fully expanded reference tree (plain recursion)."""
    total = 0
    for ref in module.nodes:
        if hasattr(ref, "op"):
            total += 1
        else:
            total += count_leaves(store[ref.id], store)
    return total


def expanded_leaf_labels(module, store):
    """Leaf labels in depth-first node order, matching expansion order."""
    out = []
    for ref in module.nodes:
        if hasattr(ref, "op"):
            out.append(ref.op.label)
        else:
            out.extend(expanded_leaf_labels(store[ref.id], store))
    return out


def hierarchy_depth(module, store):
    kids = [store[r.id] for r in module.nodes if not hasattr(r, "op")]
    return 1 + max((hierarchy_depth(k, store) for k in kids), default=0)


def epochs_oracle(complexity, generation, max_epochs):
    """Direct transcription with integer truncation of the non-negative quotient."""
    denom = math.log(generation + 1)
    if denom < 1:
        denom = 1
    q = int(complexity / denom)
    if q > max_epochs:
        q = max_epochs
    if q < 1:
        q = 1
    return q


def longest_layer_path(n, edges):
    """Longest IN->OUT path measured in layer nodes, by exhaustive path search."""
    succ = {}
    for s, d in edges:
        succ.setdefault(s, []).append(d)

    best = 0

    def dfs(v, length):
        nonlocal best
        if v == OUT:
            best = max(best, length)
            return
        for w in succ.get(v, ()):
            dfs(w, length + (0 if w == OUT else 1))

    dfs(IN, 0)
    return best
