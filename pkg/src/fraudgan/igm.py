"""Information-gain quantities in nats.

Joints are ``(C, X)`` matrices with the constraint on rows; auxiliary
distributions ``q`` share that layout with every column summing to one.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor

_TOL = 1e-9


def _check_dist(p: np.ndarray, axis=None, what: str = "distribution") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0 or not np.isfinite(p).all() or (p < 0).any():
        raise ValueError(f"invalid {what}: entries must be finite and non-negative")
    if not np.allclose(p.sum(axis=axis), 1.0, rtol=0, atol=_TOL):
        raise ValueError(f"invalid {what}: does not sum to 1")
    return p


def _plogp(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log(p[nz])
    return out


def entropy(dist) -> float:
    p = _check_dist(dist)
    return float(max(-_plogp(p).sum(), 0.0))


def conditional_entropy(joint) -> float:
    """H(c | x) for a ``(C, X)`` joint."""
    p = _check_dist(joint, what="joint")
    px = p.sum(axis=0)
    return float(max(-(_plogp(p).sum() - _plogp(px).sum()), 0.0))


def mutual_information(joint) -> float:
    """I(c; x) = H(c) - H(c | x)."""
    p = _check_dist(joint, what="joint")
    return max(entropy(p.sum(axis=1)) - conditional_entropy(p), 0.0)


def posterior(joint) -> np.ndarray:
    """P(c | x) as a ``(C, X)`` table; columns with p(x) = 0 are uniform."""
    p = _check_dist(joint, what="joint")
    px = p.sum(axis=0, keepdims=True)
    return np.where(px > 0, p / np.where(px > 0, px, 1.0), 1.0 / p.shape[0])


def variational_lower_bound(joint, q) -> float:
    """E_{p(c,x)}[log q(c|x)] + H(c); ``-inf`` when q misses support of p."""
    p = _check_dist(joint, what="joint")
    q = _check_dist(q, axis=0, what="auxiliary distribution")
    if q.shape != p.shape:
        raise ValueError(f"q shape {q.shape} != joint shape {p.shape}")
    support = p > 0
    if (q[support] == 0).any():
        return -math.inf
    return float((p[support] * np.log(q[support])).sum()) + entropy(p.sum(axis=1))


def expected_kl_gap(joint, q) -> float:
    """E_x[KL(P(.|x) || Q(.|x))], the slack of the lower bound."""
    p = _check_dist(joint, what="joint")
    q = _check_dist(q, axis=0, what="auxiliary distribution")
    post = posterior(p)
    support = p > 0
    if (q[support] == 0).any():
        return math.inf
    return float((p[support] * (np.log(post[support]) - np.log(q[support]))).sum())


def lemma_expectation_check(f, joint) -> tuple[float, float]:
    """Both sides of E_{x,y}[f(x, y)] = E_{x,y, x'~X|y}[f(x', y)] by exact summation.

    ``joint`` and ``f`` are ``(X, Y)`` tables.
    """
    p = _check_dist(joint, what="joint")
    f = np.asarray(f, dtype=np.float64)
    if f.shape != p.shape:
        raise ValueError("f and joint must share a shape")
    lhs = float((p * f).sum())
    py = p.sum(axis=0)
    x_given_y = np.where(py > 0, p / np.where(py > 0, py, 1.0), 0.0)
    # inner[x, y] = sum_x' p(x'|y) f(x', y); independent of the outer x
    inner = (x_given_y * f).sum(axis=0)
    rhs = float((p * inner[None, :]).sum())
    return lhs, rhs


def igm_regularizer_estimate(gen, df, batch_size: int, rng: Rng, embeddings, *,
                             baseline: bool = False) -> Tensor:
    """Monte-Carlo estimate of E[log Q(c|x)] + ln C over x ~ G(z, c), c uniform.

    The returned scalar differentiates into D_f (through the Q head) and into
    the generator through a zero-valued score-function term whose per-sample
    reward is log Q(c|x). With ``baseline`` the batch mean is subtracted from
    that reward, which lowers the variance without biasing the gradient.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    C = gen.config.C
    if df.config.C != C:
        raise ValueError(f"generator C={C} but Q head has C={df.config.C}")
    cats = rng.integers(0, C, batch_size)
    ids, _, z = gen.sample_ids(cats, rng)
    _, q_logits = df.forward(ids, embeddings, cats)
    log_q = ad.pick(ad.log_softmax(q_logits), cats)
    estimate = ad.mean(log_q + math.log(C))
    seq_lp = gen.step_log_probs(ids, z, cats).sum(axis=1)
    reward = log_q.data - log_q.data.mean() if baseline else log_q.data
    reward = Tensor(reward)
    score_fn = ad.mean(reward * (seq_lp - ad.stop_gradient(seq_lp)))
    return estimate + score_fn
