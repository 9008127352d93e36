"""Engine configuration: one YAML file with every field defaulted; CLI
flags override file values."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import yaml

from .errors import ConfigError, IoError
from .executor import Limits
from .grpo import GrpoConfig
from .llm import CostLedger, HttpModelClient, MockModelClient, ModelClient, ModelRates
from .metaloop import MetaLoopConfig
from .reward import RewardWeights
from .sandbox import SandboxClient, StubSandbox, SubprocessSandbox


@dataclass(frozen=True)
class ClientSpec:
    endpoint: str | None = None
    model: str = "default"


@dataclass(frozen=True)
class EngineConfig:
    meta: ClientSpec = ClientSpec(model="meta")
    worker: ClientSpec = ClientSpec(model="worker")
    mock_script: str | None = None
    rounds: int = 10
    group_size: int = 5
    repetitions: int = 3
    early_stop: bool = True
    weights: RewardWeights = RewardWeights()
    complexity_cap: int = 100
    grpo: GrpoConfig = GrpoConfig()
    limits: Limits = Limits()
    rates: Mapping[str, ModelRates] = field(default_factory=dict)
    sandbox_command: tuple[str, ...] = ()
    sandbox_stub: Mapping[str, Any] | None = None
    seed: int = 0
    output_dir: str = "out"
    meta_temperature: float = 0.7
    instruction: str = ""

    def __post_init__(self):
        # Exactly one transport per client: HTTP endpoint or mock script.
        # (Absent transports are tolerated until build_clients; the trace
        # post-processing commands never talk to a model.)
        for name, spec in (("meta", self.meta), ("worker", self.worker)):
            if spec.endpoint and self.mock_script:
                raise ConfigError(name, "endpoint and mock_script are mutually exclusive")
        if self.sandbox_command and self.sandbox_stub is not None:
            raise ConfigError("sandbox", "command and stub are mutually exclusive")

    def metaloop_config(self) -> MetaLoopConfig:
        return MetaLoopConfig(
            rounds=self.rounds,
            repetitions=self.repetitions,
            early_stop=self.early_stop,
            group_size=self.group_size,
            meta_model=self.meta.model,
            worker_model=self.worker.model,
            meta_temperature=self.meta_temperature,
            weights=self.weights,
            complexity_cap=self.complexity_cap,
            limits=self.limits,
            seed=self.seed,
            instruction=self.instruction,
        )

    def build_clients(self) -> tuple[ModelClient, ModelClient]:
        if self.mock_script:
            ledger = CostLedger()
            mock = MockModelClient.from_file(self.mock_script, rates=self.rates, ledger=ledger)
            return mock, mock
        for name, spec in (("meta", self.meta), ("worker", self.worker)):
            if not spec.endpoint:
                raise ConfigError(name, "needs either an endpoint or a mock_script")
        meta = HttpModelClient(self.meta.endpoint, rates=self.rates,
                               timeout_s=self.limits.node_timeout_s)
        worker = HttpModelClient(self.worker.endpoint, rates=self.rates,
                                 timeout_s=self.limits.node_timeout_s)
        return meta, worker

    def build_sandbox(self) -> SandboxClient:
        if self.sandbox_stub is not None:
            stub = dict(self.sandbox_stub)
            return StubSandbox(
                script={str(k): list(v) for k, v in (stub.get("solutions") or {}).items()},
                default=stub.get("default"),
            )
        if self.sandbox_command:
            return SubprocessSandbox(self.sandbox_command)
        raise ConfigError("sandbox", "needs either a command or a stub section")


def _get(section: Mapping, key: str, default, caster, path: str):
    value = section.get(key, default)
    try:
        return caster(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}.{key}" if path else key, str(exc)) from exc


def load_config(path: str | None, overrides: Mapping[str, Any] | None = None) -> EngineConfig:
    """Read the config file (all fields optional) and apply overrides from
    CLI flags. Raises :class:`ConfigError` naming the offending field."""
    doc: dict = {}
    if path:
        try:
            with open(path, encoding="utf-8") as handle:
                doc = yaml.safe_load(handle) or {}
        except OSError as exc:
            raise IoError(f"cannot read config {path!r}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("<file>", "config must be a mapping")
    doc = dict(doc)
    doc.update({k: v for k, v in (overrides or {}).items() if v is not None})

    meta_raw = doc.get("meta") or {}
    worker_raw = doc.get("worker") or {}
    reward_raw = doc.get("reward") or {}
    grpo_raw = doc.get("grpo") or {}
    limits_raw = doc.get("limits") or {}
    sandbox_raw = doc.get("sandbox") or {}
    rates_raw = doc.get("rates") or {}

    try:
        weights = RewardWeights(
            w_perf=_get(reward_raw, "w_perf", 1.0, float, "reward"),
            w_cplx=_get(reward_raw, "w_cplx", 0.1, float, "reward"),
            w_dist=_get(reward_raw, "w_dist", 0.1, float, "reward"),
        )
        grpo = GrpoConfig(
            k=_get(grpo_raw, "k", 1.1, float, "grpo"),
            T=_get(grpo_raw, "T", 3, int, "grpo"),
            eps=_get(grpo_raw, "eps", 0.2, float, "grpo"),
            beta=_get(grpo_raw, "beta", 0.01, float, "grpo"),
            per_round_credit=bool(grpo_raw.get("per_round_credit", False)),
        )
        limits = Limits(
            node_timeout_s=_get(limits_raw, "node_timeout_s", 60.0, float, "limits"),
            total_timeout_s=_get(limits_raw, "total_timeout_s", 300.0, float, "limits"),
            max_llm_calls=_get(limits_raw, "max_llm_calls", 50, int, "limits"),
        )
        rates = {
            str(model): ModelRates(
                prompt=_get(spec or {}, "prompt", 0.0, float, f"rates.{model}"),
                completion=_get(spec or {}, "completion", 0.0, float, f"rates.{model}"),
            )
            for model, spec in rates_raw.items()
        }
        return EngineConfig(
            meta=ClientSpec(meta_raw.get("endpoint"), str(meta_raw.get("model", "meta"))),
            worker=ClientSpec(worker_raw.get("endpoint"), str(worker_raw.get("model", "worker"))),
            mock_script=doc.get("mock_script"),
            rounds=_get(doc, "rounds", 10, int, ""),
            group_size=_get(doc, "group_size", 5, int, ""),
            repetitions=_get(doc, "repetitions", 3, int, ""),
            early_stop=bool(doc.get("early_stop", True)),
            weights=weights,
            complexity_cap=_get(reward_raw, "cap", 100, int, "reward"),
            grpo=grpo,
            limits=limits,
            rates=rates,
            sandbox_command=tuple(sandbox_raw.get("command") or ()),
            sandbox_stub=sandbox_raw.get("stub"),
            seed=_get(doc, "seed", 0, int, ""),
            output_dir=str(doc.get("output_dir", "out")),
            meta_temperature=_get(doc, "meta_temperature", 0.7, float, ""),
            instruction=str(doc.get("instruction", "")),
        )
    except ValueError as exc:
        raise ConfigError("<config>", str(exc)) from exc
