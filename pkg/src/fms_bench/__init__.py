"""Hierarchical factory simulator, coordination runtime, and metrics evaluator."""

from .controllers import (
    ControllerBinding,
    DecisionAudit,
    fallback_decide,
    parse_model_response,
)
from .engine import WorldState, advance, init_world
from .instances import (
    InstanceConfig,
    SchemaError,
    ValidationError,
    generate_jobs,
    load_instance,
    validate_instance,
)
from .interpreter import Activation, build_payload, interpret, legal_actions
from .metrics import (
    EpisodeTrace,
    MetricRecord,
    aggregate_suite,
    compute_episode_metrics,
    compute_overshoot,
)
from .paradigms import (
    AuthorityMode,
    ProtocolRuntime,
    authority_mode_ids,
    get_authority_mode,
    register_authority_mode,
)
from .runner import (
    RunRequest,
    load_episode,
    persist_episode,
    recompute_case,
    resolve_suite,
    run_case,
    run_episode,
    run_suite,
)

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "AuthorityMode",
    "ControllerBinding",
    "DecisionAudit",
    "EpisodeTrace",
    "InstanceConfig",
    "MetricRecord",
    "ProtocolRuntime",
    "RunRequest",
    "SchemaError",
    "ValidationError",
    "WorldState",
    "advance",
    "aggregate_suite",
    "authority_mode_ids",
    "build_payload",
    "compute_episode_metrics",
    "compute_overshoot",
    "fallback_decide",
    "generate_jobs",
    "get_authority_mode",
    "init_world",
    "interpret",
    "legal_actions",
    "load_episode",
    "load_instance",
    "parse_model_response",
    "persist_episode",
    "recompute_case",
    "register_authority_mode",
    "resolve_suite",
    "run_case",
    "run_episode",
    "run_suite",
    "validate_instance",
    "__version__",
]
