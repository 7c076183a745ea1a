"""Hierarchical evolutionary neural architecture search."""

from .evaluation import (
    BenchmarkTable,
    CellConstraints,
    EvaluationResult,
    RandomEvaluator,
    SurrogateConfig,
    SurrogateEvaluator,
    TabularEvaluator,
    check_constraints,
)
from .evolution import (
    EvolutionConfig,
    PopulationMember,
    generate_module,
    initial_population,
    mutate,
    step_generation,
    training_epochs,
)
from .module_graph import (
    INPUT,
    OUTPUT,
    FlatGraph,
    LayerOp,
    LayerRef,
    ModuleDef,
    ModuleRef,
    canonical_hash,
    complexity,
    flat_stats,
    flatten,
    validate,
)
from .registry import ListsState, initialize, layer_ops

__version__ = "0.1.0"
