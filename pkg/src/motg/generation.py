"""Mixture-of-token generation and the single-token baseline.

A think phase feeds aggregated mixture embeddings back into the model until an
end criterion fires; then the think-close marker is appended as an ordinary
token and the answer is decoded one token at a time.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch

from . import aggregate as agg
from .errors import InvalidInputError, InvalidTrajectoryError
from .model import TinyDecoder, embed_sequence, next_distribution
from .sampling import SampledSet, SamplingRule, apply_temperature, draw_index, sample
from .simplex import shannon_entropy
from .tasks import VOCAB

DIGEST_SIZE = 8
ThinkEnd = Literal["criteria", "sampled_end", "max_steps", "overflow"]


@dataclass(frozen=True)
class EndCriteria:
    kind: Literal["end_think_most_likely", "entropy_below"] = "end_think_most_likely"
    end_token_id: int | None = None
    threshold: float | None = None
    consecutive_rounds: int | None = None

    def __post_init__(self):
        if self.kind == "end_think_most_likely":
            if self.end_token_id is None:
                object.__setattr__(self, "end_token_id", VOCAB.think_close)
            if self.threshold is not None or self.consecutive_rounds is not None:
                raise InvalidInputError("threshold/consecutive_rounds only apply to entropy_below")
        elif self.kind == "entropy_below":
            if self.threshold is None or not self.threshold > 0:
                raise InvalidInputError("entropy_below needs a positive threshold (nats)")
            if self.consecutive_rounds is None:
                object.__setattr__(self, "consecutive_rounds", 1)
            if self.consecutive_rounds < 1:
                raise InvalidInputError("consecutive_rounds must be >= 1")
            if self.end_token_id is not None:
                raise InvalidInputError("end_token_id only applies to end_think_most_likely")
        else:
            raise InvalidInputError(f"unknown end criteria {self.kind!r}")


@dataclass
class EndHistory:
    below: int = 0


def check_end(criteria: EndCriteria, p: np.ndarray, history: EndHistory) -> bool:
    """Decide whether the think phase stops before sampling from ``p``."""
    if criteria.kind == "end_think_most_likely":
        return int(np.argmax(p)) == criteria.end_token_id
    if shannon_entropy(p) < criteria.threshold:
        history.below += 1
    else:
        history.below = 0
    return history.below >= criteria.consecutive_rounds


@dataclass(frozen=True)
class GenConfig:
    sampling: SamplingRule = field(default_factory=SamplingRule)
    aggregation: agg.AggregationRule = field(default_factory=agg.AggregationRule)
    end_criteria: EndCriteria = field(default_factory=EndCriteria)
    max_think_steps: int = 8
    max_answer_steps: int = 12
    temperature: float = 1.0
    greedy_answer: bool = False
    method: Literal["motg", "single_token"] = "motg"
    think_close_id: int = VOCAB.think_close
    eos_id: int = VOCAB.eos

    def __post_init__(self):
        if self.max_think_steps < 0 or self.max_answer_steps < 1:
            raise InvalidInputError("max_think_steps must be >= 0 and max_answer_steps >= 1")
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise InvalidInputError("temperature must be finite and positive")
        if self.method not in ("motg", "single_token"):
            raise InvalidInputError(f"unknown generation method {self.method!r}")

    def check_context(self, prompt_len: int, context_length: int):
        need = prompt_len + self.max_think_steps + self.max_answer_steps
        if need > context_length:
            raise InvalidInputError(
                f"prompt ({prompt_len}) + max_think_steps ({self.max_think_steps}) + "
                f"max_answer_steps ({self.max_answer_steps}) = {need} exceeds context_length {context_length}"
            )


@dataclass
class StepRecord:
    sampled_set: SampledSet
    weights: np.ndarray | None
    agg_kind: str
    mixture: np.ndarray
    step_entropy: float
    dist_digest: list[tuple[int, float]]


@dataclass
class Trajectory:
    prompt_token_ids: tuple[int, ...]
    think_steps: list[StepRecord]
    answer_token_ids: list[int]
    decoded_text: str
    think_end: ThinkEnd
    truncated: bool = False
    reward: float | None = None
    group_index: int = 0
    trace: list[np.ndarray] | None = None  # per layer, (steps, d)

    def __len__(self):
        return len(self.think_steps) + len(self.answer_token_ids)

    def to_dict(self) -> dict:
        return {
            "prompt_token_ids": list(self.prompt_token_ids),
            "think_steps": [
                {
                    "token_ids": list(s.sampled_set.token_ids),
                    "raw_probs": list(s.sampled_set.raw_probs),
                    "rule": s.sampled_set.rule,
                    "weights": None if s.weights is None else s.weights.tolist(),
                    "agg_kind": s.agg_kind,
                    "mixture": s.mixture.tolist(),
                    "step_entropy": s.step_entropy,
                    "dist_digest": [list(d) for d in s.dist_digest],
                }
                for s in self.think_steps
            ],
            "answer_token_ids": list(self.answer_token_ids),
            "decoded_text": self.decoded_text,
            "think_end": self.think_end,
            "truncated": self.truncated,
            "reward": self.reward,
            "group_index": self.group_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        steps = [
            StepRecord(
                SampledSet(tuple(s["token_ids"]), tuple(s["raw_probs"]), s["rule"]),
                None if s["weights"] is None else np.asarray(s["weights"], dtype=np.float64),
                s["agg_kind"],
                np.asarray(s["mixture"], dtype=np.float64),
                s["step_entropy"],
                [(int(i), float(p)) for i, p in s["dist_digest"]],
            )
            for s in d["think_steps"]
        ]
        return cls(
            tuple(d["prompt_token_ids"]), steps, list(d["answer_token_ids"]), d["decoded_text"],
            d["think_end"], d["truncated"], d["reward"], d["group_index"],
        )


def _fmt(obj) -> str:
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return json.dumps(obj)
        return format(obj, ".17g")
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_fmt(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in obj) + "]"
    return json.dumps(obj, ensure_ascii=False)


def to_jsonl_line(obj: dict) -> str:
    """JSON with every float written to 17 significant digits."""
    return _fmt(obj)


def _digest(p: np.ndarray) -> list[tuple[int, float]]:
    top = np.argsort(-p, kind="stable")[:DIGEST_SIZE]
    return [(int(i), float(p[i])) for i in top]


class _Tracer:
    def __init__(self, enabled: bool):
        self.rows: list[list[np.ndarray]] | None = [] if enabled else None

    def add(self, hidden: list[np.ndarray]):
        if self.rows is not None:
            self.rows.append(hidden)

    def result(self) -> list[np.ndarray] | None:
        if self.rows is None:
            return None
        if not self.rows:
            return []
        return [np.stack([r[layer] for r in self.rows]) for layer in range(len(self.rows[0]))]


def _decode_tokens(model: TinyDecoder, X: torch.Tensor, temperature: float, max_steps: int, rng,
                   greedy: bool, eos_id: int, tracer: _Tracer) -> tuple[list[int], torch.Tensor, bool]:
    ids: list[int] = []
    N = model.cfg.context_length
    for _ in range(max_steps):
        if X.shape[0] >= N:
            return ids, X, True
        p, hidden, _ = next_distribution(model, X)
        tracer.add(hidden)
        if greedy:
            tok = int(np.argmax(p))
        else:
            tok = draw_index(apply_temperature(p, temperature), rng)
        ids.append(tok)
        X = torch.cat([X, model.tok_emb[tok][None].detach()])
        if tok == eos_id:
            break
    return ids, X, False


@torch.no_grad()
def standard_generate(model: TinyDecoder, prompt_ids, temperature: float, max_steps: int,
                      rng: np.random.Generator, greedy: bool = False, eos_id: int = VOCAB.eos) -> list[int]:
    """Plain autoregressive decoding until end-of-sequence or ``max_steps``."""
    if not prompt_ids:
        raise InvalidInputError("prompt must be non-empty")
    X = embed_sequence(model, prompt_ids).detach()
    ids, _, _ = _decode_tokens(model, X, temperature, max_steps, rng, greedy, eos_id, _Tracer(False))
    return ids


def _finish(model, prompt_ids, X, steps, think_end, cfg: GenConfig, rng, tracer, vocab) -> Trajectory:
    truncated = think_end == "overflow"
    answer: list[int] = []
    if not truncated:
        if X.shape[0] >= model.cfg.context_length:
            truncated = True
        else:
            answer = [cfg.think_close_id]
            X = torch.cat([X, model.tok_emb[cfg.think_close_id][None].detach()])
            more, X, truncated = _decode_tokens(
                model, X, cfg.temperature, cfg.max_answer_steps, rng, cfg.greedy_answer, cfg.eos_id, tracer
            )
            answer += more
    text = vocab.decode(answer)
    return Trajectory(tuple(prompt_ids), steps, answer, text, think_end, truncated, trace=tracer.result())


@torch.no_grad()
def motg_generate(model: TinyDecoder, prompt_ids, cfg: GenConfig, rng: np.random.Generator,
                  trace: bool = False, vocab=VOCAB) -> Trajectory:
    """Run the think phase with mixture embeddings, then decode the answer.

    Each think step samples a token set from the current distribution,
    aggregates it into one embedding and appends that row. A singleton set
    holding only the think-close token also ends the phase, which keeps k=1
    generation identical to single-token decoding.
    """
    if not prompt_ids:
        raise InvalidInputError("prompt must be non-empty")
    E = model.tok_emb.detach()
    X = embed_sequence(model, prompt_ids).detach()
    tracer = _Tracer(trace)
    history = EndHistory()
    steps: list[StepRecord] = []
    think_end: ThinkEnd = "max_steps"
    for _ in range(cfg.max_think_steps):
        if X.shape[0] >= model.cfg.context_length:
            think_end = "overflow"
            break
        p, hidden, _ = next_distribution(model, X)
        tracer.add(hidden)
        if check_end(cfg.end_criteria, p, history):
            think_end = "criteria"
            break
        S = sample(p, cfg.sampling, rng)
        if S.token_ids == (cfg.think_close_id,):
            think_end = "sampled_end"
            break
        mix = agg.aggregate(S, cfg.aggregation, E, rng)
        steps.append(StepRecord(S, mix.weights, mix.kind, mix.vector.double().numpy().copy(),
                                shannon_entropy(p), _digest(p)))
        X = torch.cat([X, mix.vector[None]])
    return _finish(model, prompt_ids, X, steps, think_end, cfg, rng, tracer, vocab)


@torch.no_grad()
def standard_trajectory(model: TinyDecoder, prompt_ids, cfg: GenConfig, rng: np.random.Generator,
                        trace: bool = False, greedy_think: bool = False, vocab=VOCAB) -> Trajectory:
    """Single-token baseline: the same think/answer protocol with one sampled token per step.

    Think tokens are drawn from ``cfg.sampling.temperature``-adjusted
    probabilities (argmax when ``greedy_think``); sampling and aggregation
    rules are otherwise ignored.
    """
    if not prompt_ids:
        raise InvalidInputError("prompt must be non-empty")
    X = embed_sequence(model, prompt_ids).detach()
    tracer = _Tracer(trace)
    history = EndHistory()
    steps: list[StepRecord] = []
    think_end: ThinkEnd = "max_steps"
    rule = "top_k" if greedy_think else "swr_k"
    for _ in range(cfg.max_think_steps):
        if X.shape[0] >= model.cfg.context_length:
            think_end = "overflow"
            break
        p, hidden, _ = next_distribution(model, X)
        tracer.add(hidden)
        if check_end(cfg.end_criteria, p, history):
            think_end = "criteria"
            break
        if greedy_think:
            tok = int(np.argmax(p))
        else:
            tok = draw_index(apply_temperature(p, cfg.sampling.temperature), rng)
        if tok == cfg.think_close_id:
            think_end = "sampled_end"
            break
        row = model.tok_emb[tok].detach()
        S = SampledSet((tok,), (float(p[tok]),), rule)
        w = None if cfg.aggregation.kind == "elementwise_max" else np.ones(1)
        steps.append(StepRecord(S, w, cfg.aggregation.kind, row.double().numpy().copy(),
                                shannon_entropy(p), _digest(p)))
        X = torch.cat([X, row[None]])
    return _finish(model, prompt_ids, X, steps, think_end, cfg, rng, tracer, vocab)


def generate(model: TinyDecoder, prompt_ids, cfg: GenConfig, rng: np.random.Generator,
             trace: bool = False) -> Trajectory:
    if cfg.method == "single_token":
        return standard_trajectory(model, prompt_ids, cfg, rng, trace=trace)
    return motg_generate(model, prompt_ids, cfg, rng, trace=trace)


def replay_sequence(model: TinyDecoder, traj: Trajectory) -> tuple[torch.Tensor, int]:
    """Rebuild the input rows of ``traj`` from its provenance using ``model``'s embedding table.

    Returns the rows (prompt, think mixtures, all answer tokens but the last)
    and the row index whose output predicts the first think step. Gradients
    flow into the embedding table through every rebuilt row.
    """
    if not traj.prompt_token_ids:
        raise InvalidTrajectoryError("trajectory has no prompt")
    rows = [embed_sequence(model, traj.prompt_token_ids)]
    for s in traj.think_steps:
        if s.sampled_set is None or (s.weights is None and s.agg_kind != "elementwise_max"):
            raise InvalidTrajectoryError("think step lacks sampled-set provenance")
        rows.append(agg.rebuild(s.sampled_set, s.weights, s.agg_kind, model.tok_emb)[None])
    if len(traj.answer_token_ids) > 1:
        rows.append(embed_sequence(model, traj.answer_token_ids[:-1]))
    return torch.cat(rows), len(traj.prompt_token_ids) - 1
