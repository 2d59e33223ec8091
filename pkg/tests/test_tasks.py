import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motg.errors import InvalidInputError
from motg.tasks import (
    VOCAB,
    TaskSpec,
    dump_instances,
    extract_answer,
    generate_instance,
    is_holdout,
    reward,
)

KINDS = ["mod_sum", "prime_factorization", "number_sequence", "copy_reverse"]


def wrap(ans):
    return f"</think><answer>{ans}</answer><eos>"


def test_vocabulary_round_trip():
    assert len(VOCAB) == 51
    text = "12+7 mod 5"
    assert VOCAB.decode(VOCAB.encode(text)) == text
    ids = [VOCAB.think_close, VOCAB.answer_open] + VOCAB.encode("4") + [VOCAB.answer_close, VOCAB.eos]
    assert VOCAB.decode(ids) == "</think><answer>4</answer><eos>"
    with pytest.raises(InvalidInputError):
        VOCAB.encode("#")


@pytest.mark.parametrize("kind", KINDS)
def test_instances_self_verify_and_fit(kind):
    spec = TaskSpec(kind)
    for split in ("train", "eval"):
        for i in range(200):
            inst = generate_instance(spec, i, split)
            assert reward(inst, wrap(inst.canonical_answer)) == 1.0
            assert len(inst.prompt_token_ids) <= spec.max_prompt_tokens()
            assert len(VOCAB.encode(inst.canonical_answer)) + 4 <= spec.max_answer_tokens()
            assert inst.prompt_token_ids[-1] == VOCAB.think_open
            assert is_holdout(inst.prompt_text, spec.holdout_fraction) == (split == "eval")


def test_known_answers():
    spec = TaskSpec("mod_sum")
    inst = generate_instance(spec, 0)
    a, rest = inst.prompt_text.split("+")
    b, m = rest.split(" mod ")
    assert int(inst.canonical_answer) == (int(a) + int(b)) % int(m)


def test_determinism_and_seed_dependence():
    a = [generate_instance(TaskSpec("copy_reverse", seed=1), i).prompt_text for i in range(20)]
    b = [generate_instance(TaskSpec("copy_reverse", seed=1), i).prompt_text for i in range(20)]
    c = [generate_instance(TaskSpec("copy_reverse", seed=2), i).prompt_text for i in range(20)]
    assert a == b and a != c


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        TaskSpec("sorting")
    with pytest.raises(InvalidInputError):
        TaskSpec("mod_sum", params={"max_operand": 0})
    with pytest.raises(InvalidInputError):
        TaskSpec("mod_sum", params={"min_modulus": 9, "max_modulus": 3})
    with pytest.raises(InvalidInputError):
        TaskSpec("mod_sum", params={"bogus": 1})
    with pytest.raises(InvalidInputError):
        generate_instance(TaskSpec("mod_sum"), 0, split="test")


def test_reward_rules():
    inst = generate_instance(TaskSpec("prime_factorization"), 3)
    factors = inst.canonical_answer.split(" × ")
    shuffled = " × ".join(reversed(factors))
    assert reward(inst, wrap(shuffled)) == 1.0  # factor order does not matter
    assert reward(inst, wrap("1")) == 0.1
    assert reward(inst, "no markers") == 0.0
    assert reward(inst, "<answer>unterminated") == 0.0
    assert reward(inst, wrap("x"), format_bonus=0.0) == 0.0
    seq = generate_instance(TaskSpec("number_sequence"), 0)
    assert reward(seq, wrap(" 0" + seq.canonical_answer + " ")) == 1.0


def test_extract_answer_first_pair():
    assert extract_answer("<answer> 4 </answer><answer>5</answer>") == "4"
    assert extract_answer(b"<answer>7</answer>") == "7"
    assert extract_answer("</answer>3<answer>") is None


@settings(max_examples=300, deadline=None)
@given(st.one_of(st.binary(max_size=80), st.text(max_size=80)), st.sampled_from(KINDS))
def test_fuzzed_outputs_never_crash(text, kind):
    inst = generate_instance(TaskSpec(kind), 0)
    assert reward(inst, text) in (0.0, 0.1, 1.0)
    assert reward(inst, "<answer>" + (text if isinstance(text, str) else text.decode("latin-1")) + "</answer>") \
        in (0.0, 0.1, 1.0)


def test_dump_instances():
    buf = io.StringIO()
    dump_instances([generate_instance(TaskSpec("mod_sum"), i) for i in range(3)], buf)
    rows = [json.loads(l) for l in buf.getvalue().splitlines()]
    assert len(rows) == 3 and rows[0]["kind"] == "mod_sum"
