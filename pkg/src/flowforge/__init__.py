"""flowforge: per-query multi-agent workflow synthesis with
execution-feedback optimization and a GRPO value kernel."""

from .dsl import (
    ComplexityScore,
    Edge,
    NodeKind,
    OperatorNode,
    Port,
    PortType,
    Workflow,
    ast_complexity,
    parse_workflow,
    serialize,
    validate,
    workflow_similarity,
)
from .executor import ExecutionResult, Limits, QueryInstance, evaluate, execute_workflow
from .grpo import (
    AdvantageTable,
    GroupTrace,
    GrpoConfig,
    TokenLogProbs,
    advantages,
    grpo_objective,
    kl_term,
    normalize_rewards,
    surrogate_term,
)
from .llm import (
    CompletionRequest,
    CostLedger,
    HttpModelClient,
    Message,
    MockModelClient,
    ModelRates,
    UsageRecord,
)
from .metaloop import (
    MetaLoopConfig,
    OptimizationTrace,
    RoundRecord,
    SftSample,
    export_sft,
    optimize,
    rollout_group,
    select_best,
)
from .operators import OperatorOutput, execute_operator, instantiate_prompt
from .reward import RewardBreakdown, RewardWeights, combine, complexity_penalty, distinctness
from .sandbox import SandboxJob, StubSandbox, SubprocessSandbox, TestReport

__version__ = "0.1.0"
