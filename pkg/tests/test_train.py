import csv
import json

import numpy as np
import pytest

from motg import cli
from motg.config import dump_config, parse_config
from motg.model import load_checkpoint
from motg.train import format_warmup, train

ARTIFACTS = ["config.resolved.yaml", "versions.json", "checkpoint.bin", "reference.bin", "metrics.jsonl",
             "trajectories.jsonl", "diversity.csv", "eval.csv", "summary.json", "entropy_curves.csv",
             "entropy_per_trajectory.csv"]


def tiny_config(**over):
    data = {
        "seed": 1,
        "model": {"embed_dim": 16, "hidden_dim": 32, "num_layers": 1, "num_heads": 2, "dtype": "float64"},
        "task": {"kind": "mod_sum", "params": {"max_operand": 2, "min_modulus": 3, "max_modulus": 3}},
        "gen": {"max_think_steps": 3, "max_answer_steps": 4},
        "grpo": {"group_size": 3, "steps": 6, "eval_every": 3, "eval_samples": 2, "prompts_per_step": 2},
        "warmup": {"steps": 3, "batch_size": 2, "filler": "echo"},
        "checkpoint_every": 2,
        "analysis": {"trajectories": 2},
    }
    for k, v in over.items():
        data[k] = {**data.get(k, {}), **v} if isinstance(v, dict) else v
    return parse_config(data)


def _read(path):
    """File contents, minus the ``run`` column (the output directory name) for CSVs."""
    if path.suffix != ".csv":
        return path.read_text()
    rows = list(csv.reader(open(path, newline="")))
    drop = rows[0].index("run") if "run" in rows[0] else None
    return [[c for i, c in enumerate(r) if i != drop] for r in rows]


def test_run_emits_artifacts_and_is_deterministic(tmp_path):
    cfg = tiny_config()
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    for name in ARTIFACTS:
        assert (tmp_path / "a" / name).exists(), name
    assert a["finished"] and a["steps_done"] == 6
    for name in ("metrics.jsonl", "trajectories.jsonl", "diversity.csv", "eval.csv", "entropy_curves.csv"):
        assert _read(tmp_path / "a" / name) == _read(tmp_path / "b" / name), name
    evals = list(csv.DictReader(open(tmp_path / "a" / "eval.csv")))
    assert [int(r["step"]) for r in evals] == [0, 3, 6]
    assert json.loads(_read(tmp_path / "a" / "versions.json"))["seed"] == 1
    assert parse_config(__import__("yaml").safe_load(_read(tmp_path / "a" / "config.resolved.yaml"))) == cfg


def test_resume_equals_straight_run(tmp_path):
    cfg = tiny_config()
    train(cfg, tmp_path / "straight")
    part = train(cfg, tmp_path / "resumed", max_new_steps=3)
    assert not part["finished"] and part["steps_done"] == 3
    done = train(cfg, tmp_path / "resumed")
    assert done["steps_done"] == 6
    for name in ("metrics.jsonl", "trajectories.jsonl", "diversity.csv", "eval.csv", "entropy_curves.csv"):
        assert _read(tmp_path / "straight" / name) == _read(tmp_path / "resumed" / name), name
    m1, o1, r1, _ = load_checkpoint(tmp_path / "straight" / "checkpoint.bin")
    m2, o2, r2, _ = load_checkpoint(tmp_path / "resumed" / "checkpoint.bin")
    assert r1 == r2 and o1.step == o2.step
    for (n, p), (_, q) in zip(m1.named_parameters(), m2.named_parameters()):
        assert (p == q).all(), n


def test_warmup_lowers_loss():
    from conftest import tiny_model
    from motg.tasks import TaskSpec

    losses = format_warmup(tiny_model(), TaskSpec("mod_sum"), 40, 8, 3e-3, 2, 0)
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_cli_train_generate_analyze(tmp_path, capsys):
    cfg_path = tmp_path / "run.yaml"
    cfg_path.write_text(dump_config(tiny_config(output_dir="run")))
    import os
    os.environ[cli.OUTPUT_ROOT_ENV] = str(tmp_path / "root")
    try:
        assert cli.main(["train", str(cfg_path)]) == 0
        run = tmp_path / "root" / "run"
        assert (run / "summary.json").exists()
        capsys.readouterr()
        args = ["generate", "--checkpoint", str(run / "checkpoint.bin"), "--prompt", "1+1 mod 3", "--seed", "4"]
        assert cli.main(args + ["--dump-steps", "-"]) == 0
        first = capsys.readouterr().out
        assert cli.main(args + ["--dump-steps", "-"]) == 0
        assert capsys.readouterr().out == first
        assert "think_step,token_1,weight_1,token_2,weight_2" in first
        assert cli.main(args + ["--k", "1"]) == 0
        assert cli.main(["analyze", str(run), "--out-dir", str(tmp_path / "an")]) == 0
        assert (tmp_path / "an" / "entropy_curves.csv").exists()
        assert (tmp_path / "an" / "diversity_summary.csv").exists()
    finally:
        del os.environ[cli.OUTPUT_ROOT_ENV]
