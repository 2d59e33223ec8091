"""Group-relative policy optimization over mixture-generated trajectories."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Literal

import numpy as np
import torch

from .analysis import unique_token_counts
from .errors import InvalidInputError, InvalidTrajectoryError
from .generation import GenConfig, Trajectory, generate, replay_sequence
from .model import AdamState, TinyDecoder, log_probs, loss_and_grad, optimizer_step
from .rng import stream
from .tasks import TaskInstance, reward as task_reward

log = logging.getLogger(__name__)

LossMode = Literal["single_token_unweighted", "single_token_weighted", "multi_token_weighted"]


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 5
    kl_coeff: float = 0.2
    loss_mode: LossMode = "multi_token_weighted"
    steps: int = 300
    eval_every: int = 50
    eval_samples: int = 100
    lr: float = 3e-4
    seed: int = 0
    kl_scope: Literal["all", "think"] = "all"
    token_draw: Literal["uniform", "proportional"] = "uniform"
    prompts_per_step: int = 1

    def __post_init__(self):
        if self.group_size < 2:
            raise InvalidInputError("group_size must be >= 2")
        if self.prompts_per_step < 1:
            raise InvalidInputError("prompts_per_step must be >= 1")
        if self.kl_coeff < 0:
            raise InvalidInputError("kl_coeff must be >= 0")
        if self.loss_mode not in ("single_token_unweighted", "single_token_weighted", "multi_token_weighted"):
            raise InvalidInputError(f"unknown loss_mode {self.loss_mode!r}")
        if self.kl_scope not in ("all", "think") or self.token_draw not in ("uniform", "proportional"):
            raise InvalidInputError("kl_scope must be all|think and token_draw uniform|proportional")
        if self.steps < 0 or self.eval_every < 1 or self.eval_samples < 0 or not self.lr > 0:
            raise InvalidInputError("steps/eval_every/eval_samples/lr out of range")


def compute_advantages(rewards) -> tuple[float, float, np.ndarray]:
    """Group mean, population std, and standardized advantages (all zero when std is 0)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise InvalidInputError("need at least two rewards per group")
    if not np.all(np.isfinite(r)):
        raise InvalidInputError("rewards must be finite")
    # exact rational centering: adding a constant that the floats represent exactly
    # leaves the advantages bit-identical
    exact = [Fraction(float(x)) for x in r]
    mean = sum(exact) / len(exact)
    centered = [x - mean for x in exact]
    var = sum(c * c for c in centered) / len(exact)
    if var == 0:
        return float(mean), 0.0, np.zeros_like(r)
    sigma = math.sqrt(var)
    return float(mean), sigma, np.array([float(c) / sigma for c in centered])


def _positions(model: TinyDecoder, traj: Trajectory) -> torch.Tensor:
    """Log-probs (float64) at every trajectory position: think steps then answer tokens."""
    X, start = replay_sequence(model, traj)
    logits, _ = model(X)
    return log_probs(logits)[start : start + len(traj)]


def _check(traj: Trajectory):
    for s in traj.think_steps:
        if s.sampled_set is None:
            raise InvalidTrajectoryError("think step lacks sampled-set provenance")


def _answer_terms(lp: torch.Tensor, traj: Trajectory) -> torch.Tensor:
    n = len(traj.think_steps)
    if not traj.answer_token_ids:
        return lp.new_zeros(())
    idx = torch.as_tensor(traj.answer_token_ids)
    return lp[n + torch.arange(len(idx)), idx].sum()


def single_token_logprob(traj: Trajectory, model: TinyDecoder, rng: np.random.Generator, weighted: bool,
                         draw: str = "uniform") -> tuple[torch.Tensor, list[int]]:
    """Log-likelihood using one token per think step; returns the value and the drawn tokens.

    The drawn token is uniform over the sampled set (or proportional to its
    recorded probability). In the weighted form each think term is scaled by
    that recorded probability.
    """
    _check(traj)
    lp = _positions(model, traj)
    total = _answer_terms(lp, traj)
    picks = []
    for t, s in enumerate(traj.think_steps):
        ids, raw = s.sampled_set.token_ids, np.asarray(s.sampled_set.raw_probs)
        if draw == "uniform":
            i = int(rng.integers(len(ids)))
        else:
            i = int(rng.choice(len(ids), p=raw / raw.sum()))
        picks.append(ids[i])
        term = lp[t, ids[i]]
        total = total + (raw[i] * term if weighted else term)
    return total, picks


def multi_token_logprob(traj: Trajectory, model: TinyDecoder) -> torch.Tensor:
    """Plug-in estimate: each think step contributes sum_z p(z) log p(z) over its sampled set.

    ``p(z)`` is the probability recorded at generation time (a constant
    weight); ``log p(z)`` is re-evaluated under ``model``. On-policy the two
    coincide, so the value equals the full plug-in estimate.
    """
    _check(traj)
    lp = _positions(model, traj)
    total = _answer_terms(lp, traj)
    for t, s in enumerate(traj.think_steps):
        ids = torch.as_tensor(s.sampled_set.token_ids)
        w = torch.as_tensor(s.sampled_set.raw_probs, dtype=torch.float64)
        total = total + (w * lp[t, ids]).sum()
    return total


def kl_penalty(model: TinyDecoder, ref: TinyDecoder, traj: Trajectory, scope: str = "all") -> torch.Tensor:
    """Mean over positions of the exact KL(current || reference) next-token divergence."""
    _check(traj)
    n = len(traj) if scope == "all" else len(traj.think_steps)
    if n == 0:
        return torch.zeros((), dtype=torch.float64)
    lp = _positions(model, traj)[:n]
    with torch.no_grad():
        lq = _positions(ref, traj)[:n]
    return (lp.exp() * (lp - lq)).sum(-1).mean()


def trajectory_logprob(traj, model, mode: LossMode, rng, draw="uniform"):
    if mode == "multi_token_weighted":
        return multi_token_logprob(traj, model)
    return single_token_logprob(traj, model, rng, mode == "single_token_weighted", draw)[0]


def grpo_loss(model: TinyDecoder, ref: TinyDecoder | None, trajs: list[Trajectory], advantages,
              cfg: GrpoConfig, rng: np.random.Generator) -> tuple[torch.Tensor, dict]:
    """-(1/G) sum_g A_g logprob_g / |tau_g| + beta (1/G) sum_g KL_g."""
    G = len(trajs)
    pg = torch.zeros((), dtype=torch.float64)
    kl = torch.zeros((), dtype=torch.float64)
    for traj, a in zip(trajs, advantages):
        if len(traj) == 0:
            continue
        if a != 0:
            pg = pg - float(a) * trajectory_logprob(traj, model, cfg.loss_mode, rng, cfg.token_draw) / len(traj)
        if cfg.kl_coeff > 0 and ref is not None:
            kl = kl + kl_penalty(model, ref, traj, cfg.kl_scope)
    pg, kl = pg / G, kl / G
    loss = pg + cfg.kl_coeff * kl
    return loss, {"pg_loss": float(pg.detach()), "kl": float(kl.detach())}


@dataclass
class StepMetrics:
    """One optimizer step. Diversity entries are per group (one group per prompt)."""

    step: int
    mean_reward: float
    reward_std: float
    loss: float
    kl: float
    mean_think_len: float
    mean_unique_tokens: float
    unique_tokens_per_step: list[list[int]]
    skipped: bool = False

    def to_dict(self):
        return asdict(self)


def rollout_group(model: TinyDecoder, instance: TaskInstance, gen_cfg: GenConfig, G: int, seed: int, step: int,
                  format_bonus: float = 0.1, trace: bool = False, batch_index: int = 0) -> list[Trajectory]:
    """G trajectories, each with its own stream split from ``(seed, step, batch_index)``, scored by the verifier."""
    trajs = []
    for g in range(G):
        traj = generate(model, instance.prompt_token_ids, gen_cfg, stream(seed, "gen", step, batch_index, g),
                        trace=trace)
        traj.reward = task_reward(instance, traj.decoded_text, format_bonus)
        traj.group_index = g
        trajs.append(traj)
    return trajs


def grpo_step(model: TinyDecoder, opt: AdamState, ref: TinyDecoder | None, instances,
              gen_cfg: GenConfig, cfg: GrpoConfig, step: int, format_bonus: float = 0.1,
              trace: bool = False) -> tuple[StepMetrics, list[list[Trajectory]]]:
    """Generate one group per prompt on-policy, standardize rewards within each group, take one optimizer step.

    ``instances`` is a single task instance or a sequence of them; the loss is
    the mean of the per-group losses.
    """
    if isinstance(instances, TaskInstance):
        instances = [instances]
    groups = [rollout_group(model, inst, gen_cfg, cfg.group_size, cfg.seed, step, format_bonus, trace, b)
              for b, inst in enumerate(instances)]
    stats = [compute_advantages([t.reward for t in grp]) for grp in groups]
    divs = [unique_token_counts(grp) for grp in groups]
    flat = [t for grp in groups for t in grp]
    mu = float(np.mean([t.reward for t in flat]))
    sigma = float(np.mean([s[1] for s in stats]))
    think_len = float(np.mean([len(t.think_steps) for t in flat]))
    uniq = float(np.mean([d.average for d in divs]))
    per_step = [d.per_step for d in divs]
    if all(t.truncated for t in flat):
        log.warning("step %d: every trajectory truncated; skipping update", step)
        return StepMetrics(step, mu, sigma, float("nan"), float("nan"), think_len, uniq, per_step,
                           skipped=True), groups

    loss_rng = stream(cfg.seed, "loss", step)
    parts = {"kl": 0.0}

    def loss_fn(m):
        total = 0.0
        parts["kl"] = 0.0
        for grp, (_, _, adv) in zip(groups, stats):
            loss, info = grpo_loss(m, ref, grp, adv, cfg, loss_rng)
            total = total + loss
            parts["kl"] += info["kl"] / len(groups)
        return total / len(groups)

    loss, grads = loss_and_grad(model, loss_fn, step=step)
    optimizer_step(model, grads, opt, cfg.lr)
    return StepMetrics(step, mu, sigma, loss, parts["kl"], think_len, uniq, per_step), groups
