"""Causal structure recovery from crowds of imperfect informants.

The package covers the full loop: simulated experts answer pairwise causal
queries about a hidden DAG, per-expert and crowd-level models turn those
answers into graph estimates, an experiment-design engine picks which pair
to ask next under a query budget, and an instrumental-variable demo shows
one downstream payoff of knowing the structure. A seeded experiment
harness, a CLI, and an HTTP elicitation service wrap the core.
"""

from .graphs import (
    Dag,
    PairRelation,
    CycleError,
    GraphError,
    NodeSetMismatch,
    TooLarge,
    UnknownNode,
    asia_fixture,
    canonical_pairs,
    enumerate_dags,
    load_network,
    node_depths,
    project_to_dag,
    reachable,
    shd,
    topological_order,
)
from .experts import (
    Expert,
    ExpertProfile,
    Protocol,
    Query,
    Response,
    all_pair_queries,
    elicit,
    make_crowd,
    make_expert,
    make_profile,
)
from .inference import (
    EdgePosterior,
    ScoreField,
    infer_edgewise,
    infer_scores,
)
from .metrics import (
    MetricsReport,
    behavior_metrics,
    edge_metrics,
    evaluate,
    order_metrics,
)
from .aggregation import (
    aggregate_expert_level,
    em_fit,
    exhaustive_scores,
    query_level_aggregate,
    structure_search,
)
from .design import (
    Criterion,
    DirichletBelief,
    GaussianBelief,
    PoolMode,
    e_optimality,
    information_matrix,
    run_sequential,
    select_stage,
)
from .iv import (
    DEFAULT_SCENARIO,
    IvScenario,
    iv_demo,
    knowledge_filter,
    relevance_check,
    simulate_iv,
    tsls,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    LlmExpertConfig,
    llm_elicit,
    load_config,
    run_experiment,
)
from .service import create_app

__version__ = "0.1.0"

__all__ = [
    "Dag",
    "PairRelation",
    "CycleError",
    "GraphError",
    "NodeSetMismatch",
    "TooLarge",
    "UnknownNode",
    "asia_fixture",
    "canonical_pairs",
    "enumerate_dags",
    "load_network",
    "node_depths",
    "project_to_dag",
    "reachable",
    "shd",
    "topological_order",
    "Expert",
    "ExpertProfile",
    "Protocol",
    "Query",
    "Response",
    "all_pair_queries",
    "elicit",
    "make_crowd",
    "make_expert",
    "make_profile",
    "EdgePosterior",
    "ScoreField",
    "infer_edgewise",
    "infer_scores",
    "MetricsReport",
    "behavior_metrics",
    "edge_metrics",
    "evaluate",
    "order_metrics",
    "aggregate_expert_level",
    "em_fit",
    "exhaustive_scores",
    "query_level_aggregate",
    "structure_search",
    "Criterion",
    "DirichletBelief",
    "GaussianBelief",
    "PoolMode",
    "e_optimality",
    "information_matrix",
    "run_sequential",
    "select_stage",
    "DEFAULT_SCENARIO",
    "IvScenario",
    "iv_demo",
    "knowledge_filter",
    "relevance_check",
    "simulate_iv",
    "tsls",
    "ConfigError",
    "ExperimentConfig",
    "LlmExpertConfig",
    "llm_elicit",
    "load_config",
    "run_experiment",
    "create_app",
    "__version__",
]
