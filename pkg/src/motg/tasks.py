"""Seeded, procedurally generated reasoning tasks with exact-match verifiers."""
from __future__ import annotations

import json
import re
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .errors import InvalidInputError
from .rng import stream

TaskKind = Literal["mod_sum", "prime_factorization", "number_sequence", "copy_reverse"]

SPECIALS = ("<pad>", "<think>", "</think>", "<answer>", "</answer>", "<eos>")
CHARS = "0123456789" + "abcdefghijklmnopqrstuvwxyz" + "+-*%=,?×" + " "
TIMES = "×"


class Vocabulary:
    """Character-level symbols plus the format markers; ids are dense."""

    def __init__(self, chars: str = CHARS, specials=SPECIALS):
        self.itos = list(specials) + list(chars)
        if len(set(self.itos)) != len(self.itos):
            raise InvalidInputError("vocabulary symbols must be distinct")
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.specials = frozenset(specials)

    def __len__(self):
        return len(self.itos)

    pad = property(lambda self: self.stoi["<pad>"])
    think_open = property(lambda self: self.stoi["<think>"])
    think_close = property(lambda self: self.stoi["</think>"])
    answer_open = property(lambda self: self.stoi["<answer>"])
    answer_close = property(lambda self: self.stoi["</answer>"])
    eos = property(lambda self: self.stoi["<eos>"])

    def encode(self, text: str) -> list[int]:
        try:
            return [self.stoi[c] for c in text]
        except KeyError as e:
            raise InvalidInputError(f"character {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.itos[i] for i in ids)


VOCAB = Vocabulary()

_DEFAULTS: dict[str, dict[str, int]] = {
    "mod_sum": {"max_operand": 9, "min_modulus": 2, "max_modulus": 9},
    "prime_factorization": {"min_value": 2, "max_value": 999},
    "number_sequence": {"min_length": 3, "max_length": 5, "max_start": 20, "max_step": 9},
    "copy_reverse": {"min_length": 2, "max_length": 6},
}
# inclusive bounds each difficulty knob must respect
_RANGES: dict[str, dict[str, tuple[int, int]]] = {
    "mod_sum": {"max_operand": (1, 99), "min_modulus": (2, 99), "max_modulus": (2, 99)},
    "prime_factorization": {"min_value": (2, 999), "max_value": (2, 999)},
    "number_sequence": {"min_length": (2, 8), "max_length": (2, 8), "max_start": (0, 99), "max_step": (1, 20)},
    "copy_reverse": {"min_length": (1, 12), "max_length": (1, 12)},
}


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind = "mod_sum"
    seed: int = 0
    params: dict = field(default_factory=dict)
    holdout_fraction: float = 0.2
    format_bonus: float = 0.1

    def __post_init__(self):
        if self.kind not in _DEFAULTS:
            raise InvalidInputError(f"unknown task kind {self.kind!r}")
        unknown = set(self.params) - set(_DEFAULTS[self.kind])
        if unknown:
            raise InvalidInputError(f"unknown {self.kind} parameters: {sorted(unknown)}")
        merged = {**_DEFAULTS[self.kind], **self.params}
        for name, value in merged.items():
            lo, hi = _RANGES[self.kind][name]
            if not (isinstance(value, int) and lo <= value <= hi):
                raise InvalidInputError(f"{self.kind}.{name}={value!r} outside [{lo}, {hi}]")
        lo_hi = [("min_modulus", "max_modulus"), ("min_value", "max_value"), ("min_length", "max_length")]
        for lo, hi in lo_hi:
            if lo in merged and merged[lo] > merged[hi]:
                raise InvalidInputError(f"{self.kind}: {lo} > {hi}")
        if not 0 <= self.holdout_fraction < 1:
            raise InvalidInputError("holdout_fraction must lie in [0, 1)")
        if not 0 <= self.format_bonus < 1:
            raise InvalidInputError("format_bonus must lie in [0, 1)")
        object.__setattr__(self, "params", merged)

    def max_prompt_tokens(self) -> int:
        """Longest prompt in tokens, including the think-open marker."""
        p = self.params
        if self.kind == "mod_sum":
            w = len(str(p["max_operand"]))
            text = f"{'9' * w}+{'9' * w} mod {p['max_modulus']}"
        elif self.kind == "prime_factorization":
            text = f"factor {p['max_value']}"
        elif self.kind == "number_sequence":
            top = p["max_start"] + p["max_step"] * p["max_length"]
            text = ",".join([str(top)] * p["max_length"]) + ",?"
        else:
            text = "reverse " + "a" * p["max_length"]
        return len(text) + 1

    def max_answer_tokens(self) -> int:
        """Longest well-formed answer phase: think-close, markers, answer text, eos."""
        p = self.params
        if self.kind == "mod_sum":
            n = len(str(p["max_modulus"] - 1))
        elif self.kind == "prime_factorization":
            n = max(len(_factor_text(v)) for v in range(p["min_value"], p["max_value"] + 1))
        elif self.kind == "number_sequence":
            n = len(str(p["max_start"] + p["max_step"] * p["max_length"]))
        else:
            n = p["max_length"]
        return n + 4


@dataclass(frozen=True)
class TaskInstance:
    kind: TaskKind
    prompt_text: str
    prompt_token_ids: tuple[int, ...]
    canonical_answer: str
    instance_seed: int
    split: str = "train"


def _factorize(n: int) -> list[int]:
    out, f = [], 2
    while f * f <= n:
        while n % f == 0:
            out.append(f)
            n //= f
        f += 1
    if n > 1:
        out.append(n)
    return out


def _factor_text(n: int) -> str:
    return f" {TIMES} ".join(str(f) for f in _factorize(n))


def _draw(kind: str, p: dict, rng: np.random.Generator) -> tuple[str, str]:
    if kind == "mod_sum":
        a, b = (int(x) for x in rng.integers(0, p["max_operand"] + 1, size=2))
        m = int(rng.integers(p["min_modulus"], p["max_modulus"] + 1))
        return f"{a}+{b} mod {m}", str((a + b) % m)
    if kind == "prime_factorization":
        n = int(rng.integers(p["min_value"], p["max_value"] + 1))
        return f"factor {n}", _factor_text(n)
    if kind == "number_sequence":
        length = int(rng.integers(p["min_length"], p["max_length"] + 1))
        start = int(rng.integers(0, p["max_start"] + 1))
        step = int(rng.integers(1, p["max_step"] + 1))
        terms = [start + step * i for i in range(length + 1)]
        return ",".join(map(str, terms[:-1])) + ",?", str(terms[-1])
    length = int(rng.integers(p["min_length"], p["max_length"] + 1))
    word = "".join(chr(ord("a") + int(i)) for i in rng.integers(0, 26, size=length))
    return f"reverse {word}", word[::-1]


def is_holdout(prompt_text: str, fraction: float) -> bool:
    """Deterministic content hash partition; the same prompt always lands in the same split."""
    return zlib.crc32(prompt_text.encode()) % 10_000 < round(fraction * 10_000)


def generate_instance(spec: TaskSpec, index: int, split: str = "train", vocab: Vocabulary = VOCAB) -> TaskInstance:
    """Instance ``index`` of ``split`` for ``spec``; deterministic in ``(spec.seed, split, index)``.

    Train and eval prompts are drawn from disjoint halves of a content hash
    partition, so no prompt can appear in both splits.
    """
    if split not in ("train", "eval"):
        raise InvalidInputError(f"split must be 'train' or 'eval', got {split!r}")
    want_holdout = split == "eval"
    rng = stream(spec.seed, f"task/{spec.kind}/{split}", index)
    for _ in range(10_000):
        prompt, answer = _draw(spec.kind, spec.params, rng)
        if spec.holdout_fraction == 0 and not want_holdout:
            break
        if is_holdout(prompt, spec.holdout_fraction) == want_holdout:
            break
    else:
        raise InvalidInputError(f"could not draw a {split} instance for {spec.kind}; holdout partition is empty")
    ids = tuple(vocab.encode(prompt)) + (vocab.think_open,)
    return TaskInstance(spec.kind, prompt, ids, answer, index, split)


_ANSWER_RE = re.compile(re.escape("<answer>") + "(.*?)" + re.escape("</answer>"), re.DOTALL)


def extract_answer(decoded_text) -> str | None:
    """Text between the first answer-open marker and the next answer-close, stripped."""
    if isinstance(decoded_text, bytes):
        decoded_text = decoded_text.decode("utf-8", errors="replace")
    start = decoded_text.find("<answer>")
    if start < 0:
        return None
    m = _ANSWER_RE.match(decoded_text, start)
    return m.group(1).strip() if m else None


def _canonical(kind: str, text: str):
    text = " ".join(text.split())
    if kind in ("mod_sum", "number_sequence"):
        return int(text)
    if kind == "prime_factorization":
        return Counter(int(t) for t in text.split(TIMES))
    return text


def reward(instance: TaskInstance, decoded_text, format_bonus: float = 0.1) -> float:
    """1.0 for a correct answer, ``format_bonus`` if the markers parse but the answer is wrong, else 0."""
    got = extract_answer(decoded_text)
    if got is None:
        return 0.0
    try:
        ok = _canonical(instance.kind, got) == _canonical(instance.kind, instance.canonical_answer)
    except ValueError:
        ok = False
    return 1.0 if ok else float(format_bonus)


def dump_instances(instances, fh) -> None:
    for inst in instances:
        fh.write(json.dumps(asdict(inst), ensure_ascii=False) + "\n")
