"""Run orchestration: format warmup, GRPO loop, periodic eval, logs and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import platform
import signal
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .analysis import (
    DIVERSITY_COLUMNS,
    entropy_curves,
    mean_entropy_curves,
    unique_token_counts,
    write_entropy_csv,
)
from .config import RunConfig, dump_config
from .generation import GenConfig, generate, to_jsonl_line
from .grpo import grpo_step
from .model import (
    AdamState,
    TinyDecoder,
    embed_sequence,
    load_checkpoint,
    log_probs,
    loss_and_grad,
    optimizer_step,
    save_checkpoint,
    snapshot,
)
from .rng import from_state, get_state, stream
from .tasks import VOCAB, TaskSpec, generate_instance, reward

log = logging.getLogger(__name__)

CKPT = "checkpoint.bin"
REF_CKPT = "reference.bin"


def _warmup_example(spec: TaskSpec, rng: np.random.Generator, think_tokens: int, filler_kind: str = "random"):
    """A format-only sequence: real prompt, think filler, the answer of an unrelated instance.

    ``random`` filler is uniform digits; ``echo`` restates the prompt's leading
    digits (padded with random ones), which teaches the model to read the
    prompt without ever showing it a correct answer.
    """
    inst = generate_instance(spec, int(rng.integers(2**31)), "train")
    other = generate_instance(spec, int(rng.integers(2**31)), "train")
    filler = [VOCAB.stoi[str(d)] for d in rng.integers(0, 10, size=think_tokens)]
    if filler_kind == "echo":
        digits = [VOCAB.stoi[ch] for ch in inst.prompt_text if ch.isdigit()][:think_tokens]
        filler = digits + filler[len(digits):]
    target = (
        filler
        + [VOCAB.think_close, VOCAB.answer_open]
        + VOCAB.encode(other.canonical_answer)
        + [VOCAB.answer_close, VOCAB.eos]
    )
    return list(inst.prompt_token_ids), target


def format_warmup(model: TinyDecoder, spec: TaskSpec, steps: int, batch_size: int, lr: float,
                  think_tokens: int, seed: int, filler: str = "random") -> list[float]:
    """Teach the think/answer format with prompt-independent answers.

    Answers are taken from other instances, so the model learns the markers
    and the answer alphabet but not the task; any later reward gain has to
    come from RL.
    """
    rng = stream(seed, "warmup")
    opt = AdamState()
    losses = []
    for step in range(steps):
        batch = [_warmup_example(spec, rng, think_tokens, filler) for _ in range(batch_size)]

        def loss_fn(m):
            total = 0.0
            for prompt, target in batch:
                ids = prompt + target
                X = embed_sequence(m, ids[:-1])
                lp = log_probs(m(X)[0])[len(prompt) - 1 :]
                total = total - lp[torch.arange(len(target)), torch.as_tensor(target)].mean()
            return total / len(batch)

        loss, grads = loss_and_grad(model, loss_fn, step=step)
        optimizer_step(model, grads, opt, lr)
        losses.append(loss)
    return losses


def evaluate(model: TinyDecoder, spec: TaskSpec, gen_cfg: GenConfig, n: int, seed: int, step: int) -> dict:
    """pass@1 over ``n`` held-out instances with greedy answer decoding."""
    if n == 0:
        return {"step": step, "pass_at_1": float("nan"), "mean_reward": float("nan"), "n": 0}
    cfg = GenConfig(**{**gen_cfg.__dict__, "greedy_answer": True})
    rewards = []
    for i in range(n):
        inst = generate_instance(spec, i, "eval")
        traj = generate(model, inst.prompt_token_ids, cfg, stream(seed, "eval", step, i))
        rewards.append(reward(inst, traj.decoded_text, spec.format_bonus))
    r = np.asarray(rewards)
    return {"step": step, "pass_at_1": float((r == 1.0).mean()), "mean_reward": float(r.mean()), "n": n}


def _truncate_log(path: Path, keep) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(l for l in lines if keep(l)))


def _truncate_csv(path: Path, column: str, keep) -> None:
    if not path.exists():
        return
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    col = rows[0].index(column)
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows([rows[0]] + [r for r in rows[1:] if keep(int(r[col]))])


def _csv_append(path: Path, header, rows):
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(header)
        w.writerows(rows)


def _method_name(cfg: RunConfig) -> str:
    g = cfg.gen
    if g.method == "single_token":
        return "single_token"
    return f"{g.sampling.kind}-k{g.sampling.k}-{g.aggregation.kind}"


class _StopFlag:
    def __init__(self):
        self.raised = False

    def __call__(self, signum, frame):
        log.warning("signal %d received; checkpointing after the current step", signum)
        self.raised = True


def train(cfg: RunConfig, out_dir=None, max_new_steps: int | None = None, resume: bool = True) -> dict:
    """Run (or resume) a training job and return its summary.

    ``max_new_steps`` stops early after that many GRPO steps in this call,
    checkpointing first; a later call with ``resume=True`` continues the run
    exactly where it left off.
    """
    torch.set_num_threads(1)
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mcfg, gen_cfg, gcfg, spec = cfg.build_model_config(), cfg.build_gen_config(), cfg.build_grpo_config(), cfg.build_task_spec()
    method = _method_name(cfg)
    (out / "config.resolved.yaml").write_text(dump_config(cfg))
    (out / "versions.json").write_text(json.dumps({
        "motg": __version__, "python": platform.python_version(), "numpy": np.__version__,
        "torch": torch.__version__, "seed": cfg.seed,
    }, indent=2))

    ckpt = out / CKPT
    if resume and ckpt.exists():
        model, opt, rng_state, extra = load_checkpoint(ckpt, expected_config=mcfg)
        ref, _, _, _ = load_checkpoint(out / REF_CKPT, expected_config=mcfg)
        for p in ref.parameters():
            p.requires_grad_(False)
        task_rng = from_state(rng_state)
        start = int(extra["step"])
        log.info("resuming %s at step %d", out, start)
        for name in ("metrics.jsonl", "trajectories.jsonl"):
            _truncate_log(out / name, lambda l: json.loads(l).get("step", -1) < start)
        _truncate_csv(out / "diversity.csv", "train_step", lambda s: s < start)
        _truncate_csv(out / "eval.csv", "step", lambda s: s <= start)
    else:
        for name in ("metrics.jsonl", "trajectories.jsonl", "diversity.csv", "eval.csv"):
            (out / name).unlink(missing_ok=True)
        model = TinyDecoder(mcfg)
        t0 = time.time()
        wl = format_warmup(model, spec, cfg.warmup.steps, cfg.warmup.batch_size, cfg.warmup.lr,
                           cfg.warmup.think_tokens, cfg.seed, cfg.warmup.filler)
        if wl:
            log.info("format warmup: %d steps, loss %.3f -> %.3f (%.1fs)", len(wl), wl[0], wl[-1], time.time() - t0)
        ref = snapshot(model)
        opt = AdamState()
        task_rng = stream(cfg.seed, "train_tasks")
        save_checkpoint(out / REF_CKPT, ref, AdamState(), None, {"role": "reference"})
        start = 0
        _csv_append(out / "eval.csv", ["step", "pass_at_1", "mean_reward", "n"], [])
        row = evaluate(model, spec, gen_cfg, gcfg.eval_samples, cfg.seed, 0)
        _csv_append(out / "eval.csv", [], [[row["step"], row["pass_at_1"], row["mean_reward"], row["n"]]])

    stop = _StopFlag()
    old = {s: signal.signal(s, stop) for s in (signal.SIGINT, signal.SIGTERM)} if _main_thread() else {}
    end = gcfg.steps if max_new_steps is None else min(gcfg.steps, start + max_new_steps)
    step = start
    try:
        while step < end:
            insts = [generate_instance(spec, int(task_rng.integers(2**31)), "train")
                     for _ in range(gcfg.prompts_per_step)]
            metrics, groups = grpo_step(model, opt, ref, insts, gen_cfg, gcfg, step, spec.format_bonus)
            with open(out / "metrics.jsonl", "a") as f:
                f.write(to_jsonl_line(metrics.to_dict()) + "\n")
            if cfg.log_trajectories:
                with open(out / "trajectories.jsonl", "a") as f:
                    for b, grp in enumerate(groups):
                        for t in grp:
                            f.write(to_jsonl_line({"step": step, "group": b, **t.to_dict()}) + "\n")
            rows = []
            for b, grp in enumerate(groups):
                div = unique_token_counts(grp)
                rows += [[out.name, method, step, b, t, L, a] for t, (L, a) in enumerate(zip(div.per_step, div.active))]
            _csv_append(out / "diversity.csv", DIVERSITY_COLUMNS, rows)
            step += 1
            if step % gcfg.eval_every == 0 or step == gcfg.steps:
                row = evaluate(model, spec, gen_cfg, gcfg.eval_samples, cfg.seed, step)
                _csv_append(out / "eval.csv", [], [[row["step"], row["pass_at_1"], row["mean_reward"], row["n"]]])
                log.info("step %d: pass@1 %.3f", step, row["pass_at_1"])
            if step % cfg.checkpoint_every == 0 or step == end or stop.raised:
                save_checkpoint(ckpt, model, opt, get_state(task_rng), {"step": step})
            if stop.raised:
                break
    finally:
        for s, h in old.items():
            signal.signal(s, h)

    summary = {"method": method, "steps_done": step, "steps_total": gcfg.steps, "finished": step >= gcfg.steps,
               "num_params": model.num_params()}
    if step >= gcfg.steps:
        summary.update(_final_analysis(model, cfg, gen_cfg, spec, out, method))
        summary.update(_reward_summary(out / "metrics.jsonl"))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _main_thread() -> bool:
    import threading

    return threading.current_thread() is threading.main_thread()


def _reward_summary(path: Path, window: int = 50) -> dict:
    rows = [json.loads(l) for l in path.read_text().splitlines()] if path.exists() else []
    r = [row["mean_reward"] for row in rows]
    if not r:
        return {}
    w = min(window, len(r))
    return {"first_window_reward": float(np.mean(r[:w])), "last_window_reward": float(np.mean(r[-w:])),
            "reward_window": w}


def _final_analysis(model, cfg: RunConfig, gen_cfg: GenConfig, spec: TaskSpec, out: Path, method: str) -> dict:
    """Hidden-state entropy curves for a traced group on a fixed held-out prompt."""
    if not cfg.trace_hidden_states:
        return {}
    inst = generate_instance(spec, 0, "eval")
    traces = []
    per_traj = []
    for g in range(cfg.analysis.trajectories):
        traj = generate(model, inst.prompt_token_ids, gen_cfg, stream(cfg.seed, "analysis", g), trace=True)
        traces.append(traj.trace)
        if traj.trace:
            per_traj += [(g, layer, n, h) for layer, n, h in entropy_curves(traj.trace, cfg.analysis.prefix_grid)]
    rows = mean_entropy_curves(traces, cfg.analysis.prefix_grid)
    write_entropy_csv(out / "entropy_curves.csv", rows, out.name, method)
    with open(out / "entropy_per_trajectory.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "method", "trajectory", "layer", "n", "entropy"])
        w.writerows([out.name, method, g, layer, n, repr(h)] for g, layer, n, h in per_traj)
    return {"entropy_rows": len(rows)}
