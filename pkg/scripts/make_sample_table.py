"""Build the bundled 500-cell benchmark sample.

Accuracies are synthetic (seeded formula plus noise), not benchmark
measurements.  The sample exists so the tabular evaluator and the nasbench
preset can be exercised without the full external table.

    python scripts/make_sample_table.py src/hiernas/data/nasbench_sample.jsonl
"""

import itertools
import sys

import numpy as np

from hiernas.evaluation import BenchmarkTable, cell_key

OPS = ["conv1x1", "conv3x3", "maxpool3x3"]
SIZE = 500
MAX_EDGES = 9


def connected(m):
    n = len(m)
    fwd, bwd = {0}, {n - 1}
    for v in range(n):
        if v in fwd:
            fwd.update(np.nonzero(m[v])[0].tolist())
    for v in reversed(range(n)):
        if any(m[v, w] and w in bwd for w in range(n)):
            bwd.add(v)
    return all(v in fwd and v in bwd for v in range(1, n - 1))


def cells(k):
    n = k + 2
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    for mask in itertools.product((0, 1), repeat=len(pairs)):
        if sum(mask) > MAX_EDGES:
            continue
        m = np.zeros((n, n), dtype=np.int8)
        for bit, (a, b) in zip(mask, pairs):
            m[a, b] = bit
        if connected(m):
            yield m


def random_cell(k, rng):
    n = k + 2
    while True:
        m = np.triu((rng.random((n, n)) < 0.4).astype(np.int8), 1)
        if m.sum() <= MAX_EDGES and connected(m):
            return m


def accuracy(m, ops, rng):
    depth = np.zeros(len(m))
    for b in range(1, len(m)):
        preds = np.nonzero(m[:, b])[0]
        depth[b] = 1 + max(depth[p] for p in preds) if len(preds) else 0
    score = 0.80 + 0.025 * ops.count("conv3x3") + 0.01 * ops.count("conv1x1") + 0.012 * min(depth[-1], 4)
    val = float(np.clip(score + rng.normal(0, 0.01), 0.0, 1.0))
    test = float(np.clip(val - abs(rng.normal(0.004, 0.003)), 0.0, 1.0))
    return round(val, 6), round(test, 6)


def main(path):
    rng = np.random.default_rng(101)
    keys = {}
    for k in (1, 2):
        for m in cells(k):
            for ops in itertools.product(OPS, repeat=k):
                key = cell_key(m, ops)
                if key not in keys:
                    keys[key] = (m, list(ops))
    while len(keys) < SIZE:
        k = int(rng.integers(3, 6))
        m = random_cell(k, rng)
        ops = [OPS[i] for i in rng.integers(0, 3, size=k)]
        keys.setdefault(cell_key(m, ops), (m, ops))
    table = BenchmarkTable({key: accuracy(m, ops, rng) for key, (m, ops) in sorted(keys.items())})
    table.dump(path)
    print(f"wrote {len(table)} cells to {path}")


if __name__ == "__main__":
    main(sys.argv[1])
