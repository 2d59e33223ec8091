"""Command-line entry point: ``motg <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 configuration/usage error,
3 a verdict failed under ``--strict``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import MotgError

OUTPUT_ROOT_ENV = "MOTG_OUTPUT_ROOT"

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VERDICT = 0, 1, 2, 3

log = logging.getLogger("motg")


def _resolve_output(path: str | os.PathLike) -> Path:
    """Relative output paths are placed under ``$MOTG_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _floats(text: str) -> list[float]:
    """Comma-separated numbers; fractions such as ``1/3`` are accepted."""
    try:
        return [float(Fraction(x.strip())) for x in text.split(",") if x.strip()]
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like 1,2,3 or 1..6, got {text!r}") from None


def _distribution(text: str) -> np.ndarray:
    """``zipfN``, ``uniformN`` or an explicit comma list (normalized)."""
    from .analysis import zipf

    t = text.strip().lower()
    try:
        if t.startswith("zipf"):
            return zipf(int(t[4:]))
        if t.startswith("uniform"):
            n = int(t[7:])
            return np.full(n, 1.0 / n)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad distribution {text!r}") from None
    w = np.asarray(_floats(text))
    if w.size == 0 or np.any(w < 0) or w.sum() <= 0:
        raise argparse.ArgumentTypeError(f"bad distribution {text!r}")
    return w / w.sum()


# --- subcommands ---------------------------------------------------------------

def cmd_train(args) -> int:
    from .config import load_config
    from .train import train

    cfg = load_config(args.config)
    out = _resolve_output(args.output_dir or cfg.output_dir)
    summary = train(cfg, out, max_new_steps=args.max_steps, resume=not args.no_resume)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _gen_config_from_args(args, base=None):
    from .aggregate import AggregationRule
    from .generation import EndCriteria, GenConfig
    from .sampling import SamplingRule

    base = base or GenConfig()
    k = args.k if args.k is not None else base.sampling.k
    kind = args.sampling or base.sampling.kind
    temp = args.temperature if args.temperature is not None else base.sampling.temperature
    sampling = SamplingRule(
        kind=kind, k=k, temperature=temp,
        p_min=args.p_min if kind == "min_p" else None,
        cum_threshold=args.cum_threshold if kind == "nucleus" else None,
    )
    agg_kind = args.aggregation or base.aggregation.kind
    conc = args.concentration if agg_kind == "dirichlet" else None
    aggregation = AggregationRule(kind=agg_kind, dirichlet_concentration=conc)
    return GenConfig(
        sampling=sampling,
        aggregation=aggregation,
        end_criteria=base.end_criteria if isinstance(base.end_criteria, EndCriteria) else EndCriteria(),
        max_think_steps=args.max_think if args.max_think is not None else base.max_think_steps,
        max_answer_steps=args.max_answer if args.max_answer is not None else base.max_answer_steps,
        temperature=args.temperature if args.temperature is not None else base.temperature,
        greedy_answer=args.greedy_answer or base.greedy_answer,
        method="single_token" if args.single_token else base.method,
    )


def _run_config_near(checkpoint: Path):
    from .config import load_config

    path = checkpoint.parent / "config.resolved.yaml"
    return load_config(path) if path.exists() else None


def cmd_generate(args) -> int:
    from .generation import generate
    from .model import load_checkpoint
    from .rng import stream
    from .tasks import VOCAB

    ckpt = Path(args.checkpoint)
    model, _, _, _ = load_checkpoint(ckpt)
    run_cfg = _run_config_near(ckpt)
    gen_cfg = _gen_config_from_args(args, run_cfg.build_gen_config() if run_cfg else None)
    prompt = VOCAB.encode(args.prompt)
    gen_cfg.check_context(len(prompt), model.cfg.context_length)
    traj = generate(model, prompt, gen_cfg, stream(args.seed, "cli_generate"))
    print(traj.decoded_text)
    if args.dump_steps:
        fh = sys.stdout if args.dump_steps == "-" else open(_resolve_output(args.dump_steps), "w", newline="")
        try:
            w = csv.writer(fh)
            w.writerow(["think_step", "token_1", "weight_1", "token_2", "weight_2", "set_size", "entropy"])
            for t, s in enumerate(traj.think_steps):
                ids = list(s.sampled_set.token_ids)
                wts = s.weights if s.weights is not None else np.ones(len(ids)) / len(ids)
                order = np.argsort(-np.asarray(wts), kind="stable")
                top = [(VOCAB.itos[ids[i]], repr(float(wts[i]))) for i in order[:2]]
                top += [("", "")] * (2 - len(top))
                w.writerow([t, top[0][0], top[0][1], top[1][0], top[1][1], len(ids), repr(s.step_entropy)])
        finally:
            if fh is not sys.stdout:
                fh.close()
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import mean_entropy_curves, write_entropy_csv
    from .config import load_config
    from .generation import generate
    from .model import load_checkpoint
    from .rng import stream
    from .tasks import generate_instance
    from .train import CKPT, _method_name

    run = Path(args.run_dir)
    cfg_path, ckpt = run / "config.resolved.yaml", run / CKPT
    missing = [p.name for p in (cfg_path, ckpt, run / "diversity.csv") if not p.exists()]
    if missing:
        raise MotgError(f"{run}: not a completed run directory (missing {', '.join(missing)})")
    cfg = load_config(cfg_path)
    model, _, _, _ = load_checkpoint(ckpt, expected_config=cfg.build_model_config())
    gen_cfg, spec = cfg.build_gen_config(), cfg.build_task_spec()
    method = _method_name(cfg)
    out = _resolve_output(args.out_dir) if args.out_dir else run

    inst = generate_instance(spec, 0, "eval")
    n = args.trajectories or cfg.analysis.trajectories
    traces = [generate(model, inst.prompt_token_ids, gen_cfg, stream(cfg.seed, "analysis", g), trace=True).trace
              for g in range(n)]
    out.mkdir(parents=True, exist_ok=True)
    rows = mean_entropy_curves(traces, cfg.analysis.prefix_grid)
    write_entropy_csv(out / "entropy_curves.csv", rows, run.name, method)

    with open(run / "diversity.csv", newline="") as f:
        div = list(csv.DictReader(f))
    agg: dict[int, list[float]] = {}
    for r in div:
        agg.setdefault(int(r["think_step"]), []).append(float(r["unique_tokens"]))
    with open(out / "diversity_summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "method", "think_step", "mean_unique_tokens", "groups"])
        for t in sorted(agg):
            w.writerow([run.name, method, t, repr(float(np.mean(agg[t]))), len(agg[t])])
    print(f"wrote {out / 'entropy_curves.csv'} ({len(rows)} rows) and {out / 'diversity_summary.csv'}")
    return EXIT_OK


def cmd_prop1(args) -> int:
    from .analysis import prop1_verify
    from .rng import stream

    p = args.dist
    E = stream(args.seed, "prop1_embeddings").standard_normal((p.size, args.embed_dim))
    out = _resolve_output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ok = True
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        for n, G in enumerate(args.G):
            rep = prop1_verify(p, E, G, args.k_grid, args.trials, stream(args.seed, "prop1", G))
            if n == 0:
                w.writerow(rep.COLUMNS)
            for r in rep.rows:
                w.writerow([G, r.k, *(repr(float(x)) for x in (r.unique_mean, r.unique_se, r.unique_exact,
                                                                  r.dist_mean, r.dist_se, r.dist_indep_mean,
                                                                  r.dist_indep_se))])
            verdicts = {"unique_increasing": rep.unique_increasing, "dist_nonincreasing": rep.dist_nonincreasing}
            if rep.exact_agreement is not None:
                verdicts["exact_agreement"] = rep.exact_agreement
            for name, v in verdicts.items():
                print(f"G={G} {name}: {'PASS' if v else 'FAIL'}")
                ok = ok and v
            if rep.exact_agreement is not None:
                print(f"G={G} max |MC - exact| / SE = {rep.exact_z_max:.3f}")
    print(f"wrote {out}")
    return EXIT_VERDICT if args.strict and not ok else EXIT_OK


def cmd_dirichlet(args) -> int:
    from .rng import stream
    from .simplex import DirichletParams, moment_check

    params = DirichletParams(np.asarray(args.p, dtype=np.float64), args.c)
    rows = moment_check(params, args.n, stream(args.seed, "dirichlet"))
    print(f"{'stat':<5} {'i':>2} {'j':>2} {'empirical':>12} {'exact':>12} {'se':>10} {'z':>6}")
    for r in rows:
        print(f"{r.stat:<5} {r.i:>2} {r.j:>2} {r.empirical:>12.6f} {r.exact:>12.6f} {r.se:>10.2e} {r.z:>6.2f}")
    ok = all(r.z <= args.sigma for r in rows)
    print(f"all within {args.sigma:g} SE: {'PASS' if ok else 'FAIL'}")
    return EXIT_VERDICT if args.strict and not ok else EXIT_OK


def cmd_print_config(args) -> int:
    from .config import default_config, dump_config, load_config

    cfg = load_config(args.config) if args.config else default_config(args.task, args.seed)
    sys.stdout.write(dump_config(cfg))
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def _add_gen_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("generation (defaults come from the run config next to the checkpoint)")
    g.add_argument("--k", type=int, help="sampled-set size; 1 reproduces standard decoding")
    g.add_argument("--sampling", choices=["top_k", "min_p", "nucleus", "swr_k"])
    g.add_argument("--p-min", type=float, default=0.05, help="min_p threshold")
    g.add_argument("--cum-threshold", type=float, default=0.9, help="nucleus mass")
    g.add_argument("--aggregation", choices=["uniform", "normalized_prob", "dirichlet", "elementwise_max"])
    g.add_argument("--concentration", type=float, default=1.0, help="Dirichlet concentration c")
    g.add_argument("--temperature", type=float)
    g.add_argument("--max-think", type=int)
    g.add_argument("--max-answer", type=int)
    g.add_argument("--greedy-answer", action="store_true")
    g.add_argument("--single-token", action="store_true", help="plain single-token thinking")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="motg",
        description="Mixture-of-token generation with GRPO on toy verifiable tasks.",
        epilog=f"Relative output paths are resolved under ${OUTPUT_ROOT_ENV} when set.",
    )
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run or resume a training job from a YAML config")
    p.add_argument("config")
    p.add_argument("--output-dir", help="override output_dir from the config")
    p.add_argument("--max-steps", type=int, help="stop (with a checkpoint) after this many new GRPO steps")
    p.add_argument("--no-resume", action="store_true", help="start fresh even if a checkpoint exists")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode one prompt from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-steps", metavar="PATH", help="write the per-think-step mixture table ('-' for stdout)")
    _add_gen_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze", help="entropy curves and diversity summary for a finished run")
    p.add_argument("run_dir")
    p.add_argument("--trajectories", type=int, help="traced trajectories (default from the config)")
    p.add_argument("--out-dir", help="where to write CSVs (default: the run directory)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("prop1", help="Monte-Carlo check of token diversity and mixture spread versus k")
    p.add_argument("--dist", type=_distribution, default="zipf10", help="zipfN, uniformN or a comma list")
    p.add_argument("--G", type=_ints, default=[2, 5], help="group sizes, e.g. 2,5")
    p.add_argument("--k-grid", type=_ints, default=list(range(1, 7)), help="e.g. 1..6")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="prop1_report.csv")
    p.add_argument("--strict", action="store_true", help="exit 3 if a verdict fails")
    p.set_defaults(func=cmd_prop1)

    p = sub.add_parser("dirichlet", help="empirical vs closed-form Dirichlet moments")
    p.add_argument("--p", type=_floats, required=True, help="base probabilities, e.g. 1/3,1/3,1/3")
    p.add_argument("--c", type=float, default=1.0, help="concentration")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=3.0, help="tolerance in standard errors")
    p.add_argument("--strict", action="store_true", help="exit 3 if a moment is outside tolerance")
    p.set_defaults(func=cmd_dirichlet)

    p = sub.add_parser("print-config", help="print a fully resolved config (defaults if none given)")
    p.add_argument("config", nargs="?")
    p.add_argument("--task", default="mod_sum",
                   choices=["mod_sum", "prime_factorization", "number_sequence", "copy_reverse"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_print_config)
    return ap


def main(argv=None) -> int:
    from .config import ConfigError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error:\n{e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MotgError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
