"""Shared oracles for the test suite."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from fraudgan import autodiff as ad

EPS = 1e-5
REL_TOL = 1e-4


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error; 0 when both sides vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def autodiff_grads(fn, leaves: dict[str, ad.Tensor]) -> dict[str, np.ndarray]:
    for t in leaves.values():
        t.grad = None
    with ad.Tape() as tape:
        loss = fn()
    ad.backward(tape, loss)
    return {k: (np.zeros(t.shape) if t.grad is None else t.grad.copy()) for k, t in leaves.items()}


def fd_grads(fn, leaves: dict[str, ad.Tensor], eps: float = EPS, max_entries: int | None = None,
             seed: int = 0) -> dict[str, np.ndarray]:
    """Central differences of ``fn()`` (evaluated without a tape) per leaf entry.

    With ``max_entries`` a random subset of entries per leaf is probed; the
    rest are returned as NaN so comparisons can mask them out.
    """
    rs = np.random.default_rng(seed)
    out = {}
    for k, t in leaves.items():
        g = np.full(t.shape, np.nan)
        flat = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            flat = rs.choice(t.size, max_entries, replace=False)
        for i in flat:
            idx = np.unravel_index(i, t.shape)
            old = t.data[idx]
            t.data[idx] = old + eps
            up = fn().item()
            t.data[idx] = old - eps
            down = fn().item()
            t.data[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out[k] = g
    return out


def max_rel_err(fn, leaves: dict[str, ad.Tensor], **kw) -> float:
    a = autodiff_grads(fn, leaves)
    n = fd_grads(fn, leaves, **kw)
    worst = 0.0
    for k in leaves:
        mask = ~np.isnan(n[k])
        worst = max(worst, rel_err(a[k][mask], n[k][mask]))
    return worst


def leaf(rs: np.random.Generator, *shape, scale: float = 1.0, name: str | None = None) -> ad.Tensor:
    return ad.Tensor(scale * rs.standard_normal(shape), requires_grad=True, name=name)


def exhaustive_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def rank_walk_ap(scores, labels) -> float:
    """Precision at every positive while walking a stable descending sort."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    hits, precisions = 0, []
    for rank, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1
            precisions.append(Fraction(hits, rank))
    return float(sum(precisions) / len(precisions))


def hand_accuracy(scores, labels, threshold=0.5) -> float:
    right = 0
    for s, y in zip(scores, labels):
        right += int((s >= threshold) == bool(y))
    return right / len(scores)


def valid_sequences(V: int, T: int) -> np.ndarray:
    """Every id sequence of length T in which END (id 0) is absorbing."""
    import itertools

    out = []
    for seq in itertools.product(range(V), repeat=T):
        ok, ended = True, False
        for t in seq:
            if ended and t != 0:
                ok = False
            ended |= t == 0
        if ok:
            out.append(seq)
    return np.array(out, dtype=np.int64)


def toy_reward_setup(seed: int, V: int = 3, T: int = 3, C: int = 2):
    """Random generator and discriminators over a vocabulary small enough to enumerate."""
    from fraudgan.discriminator import DF, DG, Discriminator, DiscriminatorConfig
    from fraudgan.generator import Generator, GeneratorConfig

    gen = Generator(GeneratorConfig(vocab_size=V, T=T, C=C, embed_dim=3, hidden_dim=4, noise_dim=2,
                                    score_dim=2, init_scale=1.0), seed)
    rs = np.random.default_rng(seed)
    discs = []
    for kind in (DF, DG):
        d = Discriminator(DiscriminatorConfig(kind=kind, T=T, embed_dim=3, C=C, windows=(1, 2), filters=3), seed)
        for name, t in d.params.items():
            t.data = rs.standard_normal(t.shape)
        discs.append(d)
    emb = rs.uniform(-1, 1, (V, 3))
    z = gen.draw_noise(1, ad.Rng(seed, "toy-noise"))[0]
    return gen, discs[0], discs[1], emb, z


def rollout_reward_oracle(gen, reward, prefix, score: int, z) -> tuple[float, float]:
    """Exact mean and variance of the completed-sequence reward given a one-token prefix."""
    V, T = gen.config.vocab_size, gen.config.T
    seqs = np.array([s for s in valid_sequences(V, T) if s[0] == prefix[0]])
    cats = np.full(len(seqs), score)
    lp = gen.step_log_probs(seqs, np.tile(z, (len(seqs), 1)), cats).data
    cond = np.exp(lp[:, len(prefix):].sum(axis=1))
    vals = reward(seqs, cats)
    mean = float((cond * vals).sum())
    return mean, float((cond * (vals - mean) ** 2).sum())
