"""Run configuration: a YAML file validated against a pydantic schema.

The schema objects are converted into the frozen runtime dataclasses the
modules consume; one global seed fans out to the model, task, rollout and
Dirichlet streams.
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import aggregate, generation, grpo, model, sampling, tasks


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    embed_dim: int = Field(96, ge=1)
    hidden_dim: int = Field(384, ge=1)
    num_layers: int = Field(2, ge=1)
    num_heads: int = Field(4, ge=1)
    context_length: int = Field(40, ge=2)
    dtype: Literal["float32", "float64"] = "float32"
    trace_point: Literal["residual", "attn", "mlp"] = "residual"


class SamplingSection(_Strict):
    kind: Literal["top_k", "min_p", "nucleus", "swr_k"] = "top_k"
    k: int = Field(2, ge=1)
    p_min: Optional[float] = None
    cum_threshold: Optional[float] = None
    temperature: float = Field(1.0, gt=0)


class AggregationSection(_Strict):
    kind: Literal["uniform", "normalized_prob", "dirichlet", "elementwise_max"] = "dirichlet"
    dirichlet_concentration: Optional[float] = 1.0

    @model_validator(mode="after")
    def _concentration_only_for_dirichlet(self):
        if self.kind != "dirichlet":
            self.dirichlet_concentration = None
        return self


class EndSection(_Strict):
    kind: Literal["end_think_most_likely", "entropy_below"] = "end_think_most_likely"
    threshold: Optional[float] = None
    consecutive_rounds: Optional[int] = None


class GenSection(_Strict):
    method: Literal["motg", "single_token"] = "motg"
    sampling: SamplingSection = SamplingSection()
    aggregation: AggregationSection = AggregationSection()
    end_criteria: EndSection = EndSection()
    max_think_steps: int = Field(6, ge=0)
    max_answer_steps: int = Field(8, ge=1)
    temperature: float = Field(1.0, gt=0)
    greedy_answer: bool = False


class GrpoSection(_Strict):
    group_size: int = Field(5, ge=2)
    kl_coeff: float = Field(0.2, ge=0)
    loss_mode: Literal["single_token_unweighted", "single_token_weighted", "multi_token_weighted"] = (
        "multi_token_weighted"
    )
    steps: int = Field(300, ge=0)
    eval_every: int = Field(50, ge=1)
    eval_samples: int = Field(100, ge=0)
    lr: float = Field(3e-4, gt=0)
    kl_scope: Literal["all", "think"] = "all"
    token_draw: Literal["uniform", "proportional"] = "uniform"
    prompts_per_step: int = Field(1, ge=1)


class TaskSection(_Strict):
    kind: Literal["mod_sum", "prime_factorization", "number_sequence", "copy_reverse"]
    params: dict[str, int] = {}
    holdout_fraction: float = Field(0.2, ge=0, lt=1)
    format_bonus: float = Field(0.1, ge=0, lt=1)


class WarmupSection(_Strict):
    """Supervised format pretraining before RL; answers are shuffled across prompts."""

    steps: int = Field(150, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    think_tokens: int = Field(2, ge=0)
    filler: Literal["random", "echo"] = "random"


class AnalysisSection(_Strict):
    trajectories: int = Field(10, ge=1)
    prefix_grid: Optional[list[int]] = None


class RunConfig(_Strict):
    seed: int
    output_dir: str = "runs/default"
    trace_hidden_states: bool = True
    checkpoint_every: int = Field(50, ge=1)
    log_trajectories: bool = True
    model: ModelSection = ModelSection()
    gen: GenSection = GenSection()
    grpo: GrpoSection = GrpoSection()
    task: TaskSection
    warmup: WarmupSection = WarmupSection()
    analysis: AnalysisSection = AnalysisSection()

    @model_validator(mode="after")
    def _context_fits(self):
        spec = self.build_task_spec()
        need = spec.max_prompt_tokens() + self.gen.max_think_steps + self.gen.max_answer_steps
        if need > self.model.context_length:
            raise ValueError(
                f"model.context_length={self.model.context_length} is smaller than longest prompt "
                f"({spec.max_prompt_tokens()}) + gen.max_think_steps + gen.max_answer_steps = {need}"
            )
        if self.gen.max_answer_steps < spec.max_answer_tokens() - 1:
            raise ValueError(
                f"gen.max_answer_steps={self.gen.max_answer_steps} cannot fit the longest answer "
                f"({spec.max_answer_tokens() - 1} tokens after the think-close marker)"
            )
        self.build_gen_config()
        return self

    # runtime objects -------------------------------------------------------

    def build_model_config(self) -> model.ModelConfig:
        return model.ModelConfig(vocab_size=len(tasks.VOCAB), seed=self.seed, **self.model.model_dump())

    def build_gen_config(self) -> generation.GenConfig:
        g = self.gen
        end = g.end_criteria.model_dump()
        return generation.GenConfig(
            sampling=sampling.SamplingRule(**g.sampling.model_dump()),
            aggregation=aggregate.AggregationRule(**g.aggregation.model_dump()),
            end_criteria=generation.EndCriteria(**end),
            max_think_steps=g.max_think_steps,
            max_answer_steps=g.max_answer_steps,
            temperature=g.temperature,
            greedy_answer=g.greedy_answer,
            method=g.method,
        )

    def build_grpo_config(self) -> grpo.GrpoConfig:
        return grpo.GrpoConfig(seed=self.seed, **self.grpo.model_dump())

    def build_task_spec(self) -> tasks.TaskSpec:
        return tasks.TaskSpec(seed=self.seed, **self.task.model_dump())


class ConfigError(ValueError):
    """Invalid run configuration; ``str()`` lists one ``field.path: message`` per problem."""


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "\n".join(lines)


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format(e)) from None
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def default_config(task_kind: str = "mod_sum", seed: int = 0) -> RunConfig:
    """Defaults for ``task_kind``, with the answer budget and context grown to fit its longest instance."""
    spec = tasks.TaskSpec(kind=task_kind, seed=seed)
    gen = GenSection()
    answer = max(gen.max_answer_steps, spec.max_answer_tokens() - 1)
    context = max(ModelSection().context_length, spec.max_prompt_tokens() + gen.max_think_steps + answer)
    return RunConfig(seed=seed, task=TaskSection(kind=task_kind), gen=GenSection(max_answer_steps=answer),
                     model=ModelSection(context_length=context))
