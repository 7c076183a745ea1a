"""Notable / candidate / banned module lists.

New modules enter the candidate list on their first observation.  At each
generation boundary candidates with enough observations are adjudicated
against the notable list; candidates whose TTL runs out first are banned.
Banning is permanent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .module_graph import LayerOp, ModuleDef, single_layer_module

WEIGHT_FLOOR = 1e-6


class RegistryError(Exception):
    pass


class EmptyLayerSet(RegistryError):
    pass


class EmptyNotableList(RegistryError):
    pass


@dataclass
class FitnessRecord:
    module_id: str
    fitness_sum: float = 0.0
    observation_count: int = 0
    ttl_remaining: int = 0

    @property
    def average(self) -> float:
        if self.observation_count == 0:
            raise ValueError(f"no observations for {self.module_id}")
        return self.fitness_sum / self.observation_count

    def observe(self, fitness: float):
        self.fitness_sum += fitness
        self.observation_count += 1


@dataclass
class GenerationOutcome:
    promotions: list[str] = field(default_factory=list)
    bans: list[str] = field(default_factory=list)
    evictions: list[str] = field(default_factory=list)
    expired: list[str] = field(default_factory=list)


@dataclass
class ListsState:
    """The three module lists plus the definitions of every listed module.

    ``module_store`` is content addressed and may hold more modules than the
    lists reference (e.g. banned modules still alive in the population).
    """

    notable_max: int = 10
    base_ttl: int = 4
    notable: dict[str, FitnessRecord] = field(default_factory=dict)
    candidate: dict[str, FitnessRecord] = field(default_factory=dict)
    banned: set[str] = field(default_factory=set)
    module_store: dict[str, ModuleDef] = field(default_factory=dict)
    layer_ids: dict[str, str] = field(default_factory=dict)  # layer label -> seed module id

    def status(self, module_id: str) -> str | None:
        if module_id in self.notable:
            return "notable"
        if module_id in self.candidate:
            return "candidate"
        if module_id in self.banned:
            return "banned"
        return None

    def add_module(self, module: ModuleDef) -> ModuleDef:
        self.module_store.setdefault(module.id, module)
        return module

    def record_fitness(self, module_id: str, fitness: float):
        """Add one observation for ``module_id``.  Unseen ids become
        candidates; observations of banned ids are discarded."""
        if module_id in self.banned:
            return
        rec = self.notable.get(module_id) or self.candidate.get(module_id)
        if rec is None:
            rec = FitnessRecord(module_id, ttl_remaining=self.base_ttl)
            self.candidate[module_id] = rec
        rec.observe(fitness)

    def worst_notable(self) -> tuple[str, float] | None:
        if not self.notable:
            return None
        rec = min(self.notable.values(), key=lambda r: (r.average, r.module_id))
        return rec.module_id, rec.average

    def end_of_generation(self, min_observations: int, notable_max: int | None = None) -> GenerationOutcome:
        """Age the candidate list and settle every candidate that is due.

        A due candidate joins the notable list if there is a free slot or it
        strictly beats the worst notable (which is then banned); otherwise
        it is banned.  Better candidates are settled first.
        """
        cap = self.notable_max if notable_max is None else notable_max
        out = GenerationOutcome()
        for rec in self.candidate.values():
            rec.ttl_remaining = max(rec.ttl_remaining - 1, 0)

        due = [r for r in self.candidate.values() if r.observation_count >= min_observations]
        due.sort(key=lambda r: (-r.average, r.module_id))
        for rec in due:
            del self.candidate[rec.module_id]
            worst = self.worst_notable()
            if len(self.notable) < cap:
                self.notable[rec.module_id] = rec
                out.promotions.append(rec.module_id)
            elif worst is not None and rec.average > worst[1]:
                del self.notable[worst[0]]
                self.banned.add(worst[0])
                out.evictions.append(worst[0])
                out.bans.append(worst[0])
                self.notable[rec.module_id] = rec
                out.promotions.append(rec.module_id)
            else:
                self.banned.add(rec.module_id)
                out.bans.append(rec.module_id)

        for mid in [m for m, r in self.candidate.items() if r.ttl_remaining == 0]:
            del self.candidate[mid]
            self.banned.add(mid)
            out.bans.append(mid)
            out.expired.append(mid)
        return out

    def sample_notables(self, n: int, rng: np.random.Generator) -> list[str]:
        """Draw ``n`` notable ids with replacement, weighted by average fitness."""
        if not self.notable:
            raise EmptyNotableList("notable list is empty")
        if n < 1:
            raise ValueError("n must be >= 1")
        ids = list(self.notable)
        w = np.array([max(self.notable[i].average, WEIGHT_FLOOR) for i in ids], dtype=float)
        picks = rng.choice(len(ids), size=n, replace=True, p=w / w.sum())
        return [ids[k] for k in picks]

    def check_invariants(self):
        n, c, b = set(self.notable), set(self.candidate), self.banned
        assert not (n & c) and not (n & b) and not (c & b), "lists overlap"
        assert len(n) <= self.notable_max, "notable list over capacity"
        for mid in n | c:
            assert mid in self.module_store, f"{mid} missing from module store"

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict:
        def rec(r: FitnessRecord, ttl: bool):
            d = {"id": r.module_id, "def": self.module_store[r.module_id].to_dict(),
                 "sum": r.fitness_sum, "count": r.observation_count}
            if ttl:
                d["ttl"] = r.ttl_remaining
            return d

        return {
            "notable_max": self.notable_max,
            "base_ttl": self.base_ttl,
            "layers": dict(self.layer_ids),
            "notable": [rec(r, False) for r in self.notable.values()],
            "candidate": [rec(r, True) for r in self.candidate.values()],
            "banned": sorted(self.banned),
        }

    @classmethod
    def from_dict(cls, data: dict, module_store: dict[str, ModuleDef] | None = None) -> "ListsState":
        state = cls(notable_max=data["notable_max"], base_ttl=data["base_ttl"])
        if module_store:
            state.module_store.update(module_store)
        state.layer_ids = dict(data.get("layers", {}))
        for key, ttl in (("notable", False), ("candidate", True)):
            target = getattr(state, key)
            for item in data[key]:
                state.add_module(ModuleDef.from_dict(item["def"]))
                target[item["id"]] = FitnessRecord(item["id"], item["sum"], item["count"], item["ttl"] if ttl else 0)
        state.banned = set(data["banned"])
        return state


def initialize(layer_set: Sequence[LayerOp], prior_fitness: float = 0.5, notable_max: int = 10,
               base_ttl: int = 4) -> ListsState:
    """Seed the notable list with one single-layer module per operation."""
    layer_set = list(layer_set)
    if not layer_set:
        raise EmptyLayerSet("at least one layer operation is required")
    labels = [op.label for op in layer_set]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate layer labels in {labels}")
    state = ListsState(notable_max=notable_max, base_ttl=base_ttl)
    for op in layer_set:
        m = state.add_module(single_layer_module(op))
        state.layer_ids[op.label] = m.id
        state.notable[m.id] = FitnessRecord(m.id, prior_fitness, 1)
    return state


def layer_ops(specs: Iterable) -> list[LayerOp]:
    """Build LayerOps from labels or ``{label, kind}`` mappings."""
    ops = []
    for s in specs:
        if isinstance(s, LayerOp):
            ops.append(s)
        elif isinstance(s, str):
            ops.append(LayerOp(s, _guess_kind(s)))
        else:
            ops.append(LayerOp(s["label"], s.get("kind") or _guess_kind(s["label"])))
    return ops


def _guess_kind(label: str) -> str:
    low = label.lower()
    if low.startswith("conv"):
        return "convolution"
    if "pool" in low:
        return "pooling"
    return "other"
