import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_policy, random_response
from reference import ref_next_dist, ref_seq_logprob
from sharpen_lab.errors import ConfigError, InputError
from sharpen_lab.model import (
    Arch,
    LengthMode,
    Policy,
    TokenSeq,
    Vocab,
    batch_logprob,
    context_free_policy,
    init_policy,
    load_policy,
    next_token_dist,
    policy_from_dict,
    policy_to_dict,
    prompt_seq,
    response_seq,
    save_policy,
    sequence_logprob,
    sequence_logprob_grad,
    truncate_at_eos,
)


def fd_grad(policy, prompt, response, length, eps=1e-5):
    base = policy.params.copy()
    out = np.zeros_like(base)
    for i in range(base.size):
        up, dn = base.copy(), base.copy()
        up[i] += eps
        dn[i] -= eps
        out[i] = (sequence_logprob(policy.with_params(up), prompt, response, length)
                  - sequence_logprob(policy.with_params(dn), prompt, response, length)) / (2 * eps)
    return out


# -- vocab and sequences ------------------------------------------------------


def test_vocab_build_and_invariants():
    v = Vocab.build(["x", "y", "z"])
    assert v.tokens[-2:] == ("<eos>", "<pad>")
    assert v.interior_ids == [0, 1, 2]
    assert v.decode(v.encode(["z", "x"])) == ["z", "x"]
    with pytest.raises(ConfigError):
        Vocab(("a", "a", "b"), 1, 2)
    with pytest.raises(ConfigError):
        Vocab(("a", "b", "c"), 1, 1)
    with pytest.raises(ConfigError):
        Vocab(("a", "b"), 0, 1)
    with pytest.raises(InputError):
        v.id("w")
    assert Vocab.from_dict(v.to_dict()) == v


def test_length_mode_validation():
    with pytest.raises(ConfigError):
        LengthMode("variable", 0)
    with pytest.raises(ConfigError):
        LengthMode("sometimes", 3)


@pytest.mark.parametrize(
    "ids, expected",
    [((0, 2, 1, 1), (0, 2)), ((0, 1), (0, 1)), ((2, 2, 2), (2,))],
)
def test_truncate_at_eos_examples(ids, expected):
    assert truncate_at_eos(response_seq(ids), 2).ids == expected


# -- init_policy ----------------------------------------------------------------


def test_init_tabular_is_uniform_over_sampleable_tokens():
    # three sampleable tokens plus the masked pad token
    arch = Arch(k=1, vocab_size=4, pad_id=3, eos_id=2)
    pol = init_policy(arch, "tabular", 7)
    for ctx in [(), (0,), (1,), (2,)]:
        np.testing.assert_allclose(next_token_dist(pol, ctx), [1 / 3, 1 / 3, 1 / 3, 0.0], atol=1e-15)


def test_init_neural_param_count_and_determinism():
    arch = Arch(k=2, vocab_size=5, pad_id=4, eos_id=3, emb=4, hidden=8)
    a = init_policy(arch, "neural", 1)
    b = init_policy(arch, "neural", 1)
    # emb + W1 + b1 + W2 + b2; the sum is 137
    assert a.params.size == 5 * 4 + (2 * 4) * 8 + 8 + 8 * 5 + 5 == 137
    assert np.array_equal(a.params, b.params)
    assert not np.array_equal(a.params, init_policy(arch, "neural", 2).params)


def test_init_neural_half_widths():
    arch = Arch(k=2, vocab_size=5, pad_id=4, eos_id=3, emb=4, hidden=8)
    p = init_policy(arch, "neural", 3).params
    emb, W1, b1, W2, b2 = np.split(p, np.cumsum([20, 64, 8, 40]))
    assert np.abs(emb).max() <= 1 / math.sqrt(5)
    assert np.abs(W1).max() <= 1 / math.sqrt(8) and np.abs(b1).max() <= 1 / math.sqrt(8)
    assert np.abs(W2).max() <= 1 / math.sqrt(8) and np.abs(b2).max() <= 1 / math.sqrt(8)


@pytest.mark.parametrize(
    "arch, backend",
    [
        (Arch(k=0, vocab_size=4, pad_id=3, eos_id=2), "tabular"),
        (Arch(k=1, vocab_size=4, pad_id=3, eos_id=3), "tabular"),
        (Arch(k=1, vocab_size=4, pad_id=3, eos_id=2), "neural"),
        (Arch(k=12, vocab_size=8, pad_id=7, eos_id=6), "tabular"),
        (Arch(k=1, vocab_size=4, pad_id=3, eos_id=2), "transformer"),
    ],
)
def test_init_rejects_bad_arch(arch, backend):
    with pytest.raises(ConfigError):
        init_policy(arch, backend, 0)


def test_policy_is_read_only():
    pol = init_policy(Arch(k=1, vocab_size=4, pad_id=3, eos_id=2), "tabular", 0)
    with pytest.raises(ValueError):
        pol.params[0] = 1.0
    with pytest.raises(ConfigError):
        Policy("tabular", pol.arch, np.zeros(3))


# -- next_token_dist ---------------------------------------------------------------


def test_next_token_dist_reproduces_log_probability_logits(ab_vocab):
    pol = context_free_policy([0.5, 0.3, 0.2, 0.0], ab_vocab.pad_id, ab_vocab.eos_id)
    np.testing.assert_allclose(next_token_dist(pol, ()), [0.5, 0.3, 0.2, 0.0], atol=1e-15)


def test_next_token_dist_matches_reference_forward(rng):
    for backend in ("tabular", "neural"):
        for _ in range(20):
            pol = random_policy(rng, backend, V=5, k=3, emb=3, hidden=6)
            ctx = tuple(int(t) for t in rng.integers(0, 4, size=rng.integers(0, 6)))
            np.testing.assert_allclose(next_token_dist(pol, ctx), ref_next_dist(pol, ctx), rtol=0, atol=1e-12)


def test_next_token_dist_rejects_out_of_range_tokens(q_policy):
    with pytest.raises(InputError):
        next_token_dist(q_policy, (7,))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), backend=st.sampled_from(["tabular", "neural"]),
       ctx=st.lists(st.integers(0, 3), max_size=6))
def test_next_token_dist_is_a_positive_distribution(seed, backend, ctx):
    pol = random_policy(np.random.default_rng(seed), backend, V=5, k=2, scale=3.0)
    p = next_token_dist(pol, ctx)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert p[pol.arch.pad_id] == 0.0
    assert np.all(np.delete(p, pol.arch.pad_id) > 0)


# -- sequence_logprob ---------------------------------------------------------------


def test_sequence_logprob_q_examples(q_policy, variable2):
    a, b, eos = 0, 1, 2
    assert sequence_logprob(q_policy, (), (a, eos), variable2) == pytest.approx(math.log(0.1), abs=1e-12)
    assert sequence_logprob(q_policy, (), (a, a), variable2) == pytest.approx(math.log(0.25), abs=1e-12)


def test_sequence_logprob_matches_reference(rng):
    for backend in ("tabular", "neural"):
        for _ in range(40):
            pol = random_policy(rng, backend, V=5, k=2)
            mode = "fixed" if rng.random() < 0.5 else "variable"
            length = LengthMode(mode, 4)
            prompt = tuple(int(t) for t in rng.integers(0, 3, size=2))
            resp = random_response(rng, pol, 4, mode)
            got = sequence_logprob(pol, prompt, resp, length)
            assert got == pytest.approx(ref_seq_logprob(pol, prompt, resp, mode), abs=1e-12)
            assert got <= 0.0


def test_variable_mode_ignores_tokens_after_eos(q_policy):
    L = LengthMode("variable", 4)
    assert sequence_logprob(q_policy, (), (0, 2, 1, 1), L) == sequence_logprob(q_policy, (), (0, 2), L)


def test_fixed_mode_is_additive_over_the_truncation(rng):
    """Fixed log-prob = variable log-prob of the truncation + the continuation terms."""
    for _ in range(30):
        pol = random_policy(rng, "neural", V=5, k=3)
        eos = pol.arch.eos_id
        resp = random_response(rng, pol, 5, "fixed")
        if eos not in resp[:-1]:
            resp = resp[:2] + (eos,) + resp[3:]
        cut = resp.index(eos) + 1
        fixed = sequence_logprob(pol, (0,), resp, LengthMode("fixed", 5))
        var = sequence_logprob(pol, (0,), resp[:cut], LengthMode("variable", 5))
        cont = sum(math.log(ref_next_dist(pol, (0,) + resp[:t])[resp[t]]) for t in range(cut, 5))
        assert fixed == pytest.approx(var + cont, abs=1e-12)
        assert fixed <= var + cont + 1e-12


@pytest.mark.parametrize(
    "response, length",
    [
        ((0, 0, 0), LengthMode("variable", 2)),
        ((0, 2), LengthMode("fixed", 3)),
        ((0, 3), LengthMode("variable", 3)),
        ((), LengthMode("variable", 3)),
    ],
)
def test_sequence_logprob_rejects_mode_violations(q_policy, response, length):
    with pytest.raises(InputError):
        sequence_logprob(q_policy, (), response, length)


def test_batch_logprob_matches_single_calls(rng):
    pol = random_policy(rng, "neural", V=5, k=3)
    L = LengthMode("variable", 4)
    prompts = [(0,), (1, 2), ()]
    resps = [random_response(rng, pol, 4, "variable") for _ in prompts]
    lp, n = batch_logprob(pol, prompts, resps, L)
    for i, (p, r) in enumerate(zip(prompts, resps)):
        assert lp[i] == pytest.approx(sequence_logprob(pol, p, r, L), abs=1e-12)
        assert n[i] == (r.index(3) + 1 if 3 in r else len(r))


# -- gradients ---------------------------------------------------------------------------


def test_tabular_single_step_gradient_is_softmax_identity(rng):
    arch = Arch(k=1, vocab_size=4, pad_id=3, eos_id=2)
    pol = init_policy(arch, "tabular", 0).with_params(rng.normal(size=16))
    g = sequence_logprob_grad(pol, (1,), (0,), LengthMode("variable", 1))
    pi = next_token_dist(pol, (1,))
    expected = np.zeros((4, 4))
    expected[1] = np.eye(4)[0] - pi
    expected[1, 3] = 0.0
    np.testing.assert_allclose(g.reshape(4, 4), expected, atol=1e-15)


def test_eos_only_response_touches_first_context_only(rng):
    arch = Arch(k=1, vocab_size=4, pad_id=3, eos_id=2)
    pol = init_policy(arch, "tabular", 0).with_params(rng.normal(size=16))
    g = sequence_logprob_grad(pol, (), (2,), LengthMode("variable", 3)).reshape(4, 4)
    assert np.count_nonzero(g[:3]) == 0  # only the pad-context row (the empty history)
    assert np.count_nonzero(g[3]) == 3


def test_pad_column_gradient_is_zero(rng):
    pol = random_policy(rng, "neural", V=5, k=2)
    g = sequence_logprob_grad(pol, (0, 1), (1, 0, 3), LengthMode("variable", 3))
    assert np.all(np.isfinite(g))
    pol_t = random_policy(rng, "tabular", V=5, k=2)
    gt = sequence_logprob_grad(pol_t, (0, 1), (1, 0, 3), LengthMode("variable", 3))
    assert np.all(gt.reshape(-1, 5)[:, pol_t.arch.pad_id] == 0)


@pytest.mark.parametrize("backend", ["tabular", "neural"])
def test_gradient_matches_finite_differences(backend, rng):
    worst = 0.0
    for _ in range(20):
        pol = random_policy(rng, backend, V=4, k=2, emb=2, hidden=3)
        mode = "fixed" if rng.random() < 0.3 else "variable"
        L = LengthMode(mode, 3)
        resp = random_response(rng, pol, 3, mode)
        a = sequence_logprob_grad(pol, (0,), resp, L)
        f = fd_grad(pol, (0,), resp, L)
        worst = max(worst, np.max(np.abs(a - f)) / max(np.max(np.abs(f)), 1e-12))
    assert worst <= 1e-4


# -- serialization --------------------------------------------------------------------------


@pytest.mark.parametrize("backend", ["tabular", "neural"])
def test_policy_json_round_trip_is_bit_exact(backend, rng, tmp_path):
    pol = random_policy(rng, backend, V=5, k=2)
    back = policy_from_dict(policy_to_dict(pol))
    assert back.arch == pol.arch and back.backend == pol.backend
    assert np.array_equal(back.params.view(np.uint64), pol.params.view(np.uint64))
    save_policy(pol, tmp_path / "p.json")
    again = load_policy(tmp_path / "p.json")
    assert np.array_equal(again.params.view(np.uint64), pol.params.view(np.uint64))


def test_token_seq_kinds():
    assert prompt_seq([1, 2]).kind == "prompt"
    with pytest.raises(InputError):
        TokenSeq((1,), "other")
