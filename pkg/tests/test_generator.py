import itertools

import numpy as np
import pytest

from fraudgan import autodiff as ad
from fraudgan import corpus as cp
from fraudgan.autodiff import Rng
from fraudgan.corpus import END_ID
from fraudgan.generator import (
    Generator, GeneratorConfig, mle_pretrain, n_steps, policy_update, rollout_complete, sample, surrogate,
)

from helpers import rel_err


def tiny(V=3, T=3, C=2, seed=0, scale=0.8, **kw):
    cfg = GeneratorConfig(vocab_size=V, T=T, C=C, embed_dim=4, hidden_dim=5, noise_dim=3, score_dim=2,
                          init_scale=scale, **kw)
    return Generator(cfg, seed)


def valid_sequences(V, T):
    """Every id sequence with END absorbing (the support of the generator)."""
    out = []
    for seq in itertools.product(range(V), repeat=T):
        ended = False
        ok = True
        for t in seq:
            if ended and t != END_ID:
                ok = False
            ended |= t == END_ID
        if ok:
            out.append(np.array(seq))
    return np.stack(out)


def test_forced_logit_greedy_and_sampled_frequency():
    g = tiny(V=6, T=4)
    g.params["out_w"].data[:] = 0.0
    g.params["out_b"].data[:] = 0.0
    g.params["out_b"].data[3] = 10.0
    seqs = sample(g, 1, 10_000, Rng(0, "greedy"), greedy=True)
    first = np.array([s.seq.ids[0] for s in seqs])
    assert (first == 3).mean() >= 0.99
    # sampled draws follow the softmax: P(token 3) = e^10 / (e^10 + 5)
    p3 = np.exp(10) / (np.exp(10) + 5)
    drawn = np.array([s.seq.ids[0] for s in sample(g, 1, 10_000, Rng(0, "draw"))])
    assert abs((drawn == 3).mean() - p3) < 3 * np.sqrt(p3 * (1 - p3) / 10_000) + 1e-4


def test_first_step_distribution_matches_softmax():
    g = tiny(V=7, T=3, scale=1.0)
    n = 100_000
    z = np.tile(g.draw_noise(1, Rng(1, "z")), (n, 1))
    cats = np.zeros(n, dtype=np.int64)
    ids, _, _ = g.sample_ids(cats, Rng(1, "tv"), z=z)
    freq = np.bincount(ids[:, 0], minlength=7) / n
    h, c = g.initial_state(z[:1], cats[:1])
    logits, _, _ = g._step(g._input(None, 1), h, c)
    exact = ad.softmax(logits.data)[0]
    assert 0.5 * np.abs(freq - exact).sum() <= 0.01


def test_sample_determinism_and_range():
    g = tiny()
    a = sample(g, 1, 20, Rng(4, "s"))
    b = sample(g, 1, 20, Rng(4, "s"))
    assert all(np.array_equal(x.seq.ids, y.seq.ids) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        sample(g, 2, 5, Rng(0))
    with pytest.raises(ValueError):
        sample(g, -1, 5, Rng(0))


def test_stepwise_logprobs_consistent_with_teacher_forcing():
    g = tiny(V=5, T=6, scale=1.0)
    seqs = sample(g, 0, 200, Rng(2, "lp"))
    ids = np.stack([s.seq.ids for s in seqs])
    z = np.stack([s.noise for s in seqs])
    scored = g.sequence_log_prob(ids, z, np.zeros(200, dtype=np.int64))
    for s, lp in zip(seqs, scored):
        assert (s.stepwise_logprob <= 0).all()
        assert len(s.stepwise_logprob) == s.n_steps == min(s.seq.true_length + 1, 6)
        assert abs(s.stepwise_logprob.sum() - lp) <= 1e-9
        assert (s.seq.ids[s.seq.true_length:] == END_ID).all()


def test_probabilities_over_support_sum_to_one():
    g = tiny(V=3, T=3, scale=1.0)
    seqs = valid_sequences(3, 3)
    z = np.tile(g.draw_noise(1, Rng(0, "z")), (len(seqs), 1))
    lp = g.sequence_log_prob(seqs, z, np.ones(len(seqs), dtype=np.int64))
    assert abs(np.exp(lp).sum() - 1.0) < 1e-12


# -- rollouts ---------------------------------------------------------------------


def test_rollout_distribution_matches_enumeration():
    g = tiny(V=3, T=3, scale=1.5, seed=3)
    prefix = np.array([2])
    z = g.draw_noise(1, Rng(0, "noise"))[0]
    N = 50_000
    comps = rollout_complete(g, prefix, 1, N, Rng(0, "roll"), noise=z)
    assert (comps[:, 0] == 2).all()
    support = [s for s in valid_sequences(3, 3) if s[0] == 2]
    lp = g.step_log_probs(np.stack(support), np.tile(z, (len(support), 1)), np.ones(len(support), dtype=int)).data
    cond = np.exp(lp[:, 1:].sum(axis=1))
    assert abs(cond.sum() - 1) < 1e-12
    counts = {tuple(s): 0 for s in support}
    for row in comps:
        counts[tuple(row)] += 1
    emp = np.array([counts[tuple(s)] / N for s in support])
    assert 0.5 * np.abs(emp - cond).sum() <= 0.02


def test_rollout_prefix_t_minus_one_and_errors():
    g = tiny(V=4, T=5)
    prefix = np.array([2, 3, 2, 1])
    comps = rollout_complete(g, prefix, 0, 100, Rng(0, "r"))
    assert (comps[:, :4] == prefix).all()
    with pytest.raises(ad.UsageError):
        rollout_complete(g, np.array([2, 2, 2, 2, 2]), 0, 3, Rng(0))
    with pytest.raises(ValueError):
        rollout_complete(g, prefix, 0, 0, Rng(0))


def test_rollout_deterministic_and_empty_prefix_equals_sample():
    g = tiny(V=5, T=6)
    a = rollout_complete(g, np.array([3]), 1, 50, Rng(9, "r"))
    b = rollout_complete(g, np.array([3]), 1, 50, Rng(9, "r"))
    np.testing.assert_array_equal(a, b)
    empty = rollout_complete(g, np.array([], dtype=np.int64), 1, 40, Rng(9, "same"))
    sampled = np.stack([s.seq.ids for s in sample(g, 1, 40, Rng(9, "same"))])
    np.testing.assert_array_equal(empty, sampled)


# -- MLE pretraining --------------------------------------------------------------


def test_mle_repeated_sequence_nll_goes_to_zero():
    g = tiny(V=5, T=4, C=1)
    seq = cp.TokenSeq(np.array([3, 4, 0, 0]), 2)
    hist = mle_pretrain(g, [(seq, 0)] * 20, epochs=50, rng=Rng(0, "mle"), batch_size=20, rate=0.1)
    assert hist[-1] <= 0.05 and hist[-1] <= hist[0]


def test_mle_zero_epochs_and_empty_data():
    g = tiny()
    before = {k: t.data.copy() for k, t in g.params.items()}
    assert mle_pretrain(g, [(np.array([1, 0, 0]), 0)], epochs=0, rng=Rng(0)) == []
    assert all(np.array_equal(before[k], t.data) for k, t in g.params.items())
    with pytest.raises(ad.UsageError):
        mle_pretrain(g, [], 3, Rng(0))


def test_mle_learns_score_conditioning():
    spec = cp.SynthSpec(size=400, rho=1.0, vocab_size=60, min_len=4, max_len=8)
    corpus = cp.synth_corpus(spec, 0)
    vocab = cp.build_vocab(corpus)
    T = 10
    ids = cp.encode_batch(corpus, vocab, T)
    cats = np.array([cp.score_to_category(r.score, 5) for r in corpus])
    g = Generator(GeneratorConfig(len(vocab), T, 5), seed=0)
    hist = mle_pretrain(g, list(zip(ids, cats)), epochs=15, rng=Rng(0, "mle"), rate=2e-2)
    assert hist[-1] < hist[0]
    z = g.draw_noise(len(ids), Rng(0, "eval"))
    matched = g.sequence_log_prob(ids, z, cats).mean()
    mismatched = g.sequence_log_prob(ids, z, (cats + 2) % 5).mean()
    assert matched > mismatched


# -- policy gradient -------------------------------------------------------------


def _batch(seqs, rewards):
    return list(zip(seqs, rewards))


def test_zero_rewards_leave_params_unchanged():
    g = tiny()
    seqs = sample(g, 0, 8, Rng(0))
    before = {k: t.data.copy() for k, t in g.params.items()}
    policy_update(g, _batch(seqs, [0.0] * 8), rate=1.0)
    assert all(np.array_equal(before[k], t.data) for k, t in g.params.items())


def test_positive_reward_raises_log_probability():
    g = tiny(V=2, T=2)
    (s,) = sample(g, 0, 1, Rng(1))
    ids, z = s.seq.ids[None], s.noise[None]
    before = g.sequence_log_prob(ids, z, [0])[0]
    policy_update(g, [(s, 1.0)], rate=0.1)
    assert g.sequence_log_prob(ids, z, [0])[0] > before


def test_reward_scaling_scales_gradient():
    g = tiny(V=4, T=4)
    seqs = sample(g, 1, 6, Rng(5))
    r = np.linspace(-1, 2, 6)
    grads = []
    for scale in (1.0, 2.0):
        with ad.Tape() as tape:
            obj = surrogate(g, _batch(seqs, r * scale))
        ad.backward(tape, obj)
        grads.append({k: t.grad.copy() for k, t in g.params.items() if t.grad is not None})
        g.params.zero_grad()
    for k in grads[0]:
        np.testing.assert_allclose(grads[1][k], 2 * grads[0][k], rtol=1e-12, atol=1e-15)


def test_surrogate_gradient_matches_expected_reward_finite_differences():
    g = tiny(V=3, T=2, scale=1.0, seed=2)
    seqs_ids = valid_sequences(3, 2)
    n = len(seqs_ids)
    z = np.tile(g.draw_noise(1, Rng(0, "z")), (n, 1))
    cats = np.zeros(n, dtype=np.int64)
    R = np.random.default_rng(0).uniform(0, 2, n)

    def expected_reward() -> float:
        return float((np.exp(g.sequence_log_prob(seqs_ids, z, cats)) * R).sum())

    p = np.exp(g.sequence_log_prob(seqs_ids, z, cats))
    lengths = cp.true_lengths(seqs_ids)
    from fraudgan.generator import SampledSequence

    batch = [(SampledSequence(cp.TokenSeq(seqs_ids[i], int(lengths[i])), 0, np.zeros(n_steps(seqs_ids)[i]), z[i]),
              n * p[i] * R[i]) for i in range(n)]
    with ad.Tape() as tape:
        obj = surrogate(g, batch)
    ad.backward(tape, obj)
    # the three output biases form the toy parameter vector
    auto = g.params["out_b"].grad.copy()
    g.params.zero_grad()
    fd = np.zeros(3)
    for j in range(3):
        old = g.params["out_b"].data[j]
        g.params["out_b"].data[j] = old + 1e-5
        up = expected_reward()
        g.params["out_b"].data[j] = old - 1e-5
        down = expected_reward()
        g.params["out_b"].data[j] = old
        fd[j] = (up - down) / 2e-5
    assert rel_err(auto, fd) <= 1e-3


def test_surrogate_rejects_non_finite_and_empty():
    g = tiny()
    seqs = sample(g, 0, 2, Rng(0))
    with pytest.raises(ad.NumericError):
        policy_update(g, _batch(seqs, [1.0, np.nan]))
    with pytest.raises(ad.UsageError):
        surrogate(g, [])


def test_baseline_centres_rewards_per_position():
    g = tiny(V=4, T=3)
    seqs = sample(g, 0, 5, Rng(3))
    with ad.Tape() as tape:
        obj = surrogate(g, _batch(seqs, [1.0] * 5), baseline=True)
    # identical rewards leave nothing after subtracting the batch mean
    assert obj.item() == 0.0
