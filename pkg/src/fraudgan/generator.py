"""Score-conditioned LSTM review generator.

The initial LSTM state is a function of per-sequence Gaussian noise
concatenated with a learned score embedding. Decoding starts from a learned
start vector; once END is emitted every later slot is END with probability 1,
so a sequence's log-probability sums only over the steps actually sampled
(``min(true_length + 1, T)`` of them).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParamSet, Rng, Tape, Tensor
from .corpus import END_ID, TokenSeq, true_lengths


@dataclass
class GeneratorConfig:
    vocab_size: int
    T: int
    C: int
    embed_dim: int = 32
    hidden_dim: int = 32
    noise_dim: int = 16
    score_dim: int = 8
    score_in_g: bool = True
    init_scale: float = 0.1


@dataclass
class SampledSequence:
    seq: TokenSeq
    score: int
    stepwise_logprob: np.ndarray
    noise: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.stepwise_logprob)


def n_steps(ids: np.ndarray) -> np.ndarray:
    """Sampling decisions per row: the tokens before END plus END itself, capped at T."""
    ids = np.atleast_2d(ids)
    return np.minimum(true_lengths(ids) + 1, ids.shape[1])


class Generator:
    def __init__(self, config: GeneratorConfig, seed: int = 0):
        self.config = cfg = config
        rng = Rng(seed, "generator-init")
        s = cfg.init_scale
        H, E = cfg.hidden_dim, cfg.embed_dim
        cond = cfg.noise_dim + (cfg.score_dim if cfg.score_in_g else 0)
        self.params = ParamSet(
            {
                "embed": s * rng.normal((cfg.vocab_size, E)),
                "start": s * rng.normal(E),
                "score_embed": s * rng.normal((cfg.C, cfg.score_dim)),
                "init_h_w": s * rng.normal((cond, H)),
                "init_h_b": np.zeros(H),
                "init_c_w": s * rng.normal((cond, H)),
                "init_c_b": np.zeros(H),
                "lstm_wx": s * rng.normal((E, 4 * H)),
                "lstm_wh": s * rng.normal((H, 4 * H)),
                "lstm_b": np.zeros(4 * H),
                "out_w": s * rng.normal((H, cfg.vocab_size)),
                "out_b": np.zeros(cfg.vocab_size),
            }
        )

    # -- building blocks ---------------------------------------------------

    def _check_scores(self, cats) -> np.ndarray:
        cats = np.atleast_1d(np.asarray(cats, dtype=np.int64))
        if ((cats < 0) | (cats >= self.config.C)).any():
            raise ValueError(f"score category outside [0, {self.config.C})")
        return cats

    def initial_state(self, z: np.ndarray, cats: np.ndarray) -> tuple[Tensor, Tensor]:
        p = self.params
        cond = Tensor(z)
        if self.config.score_in_g:
            cond = ad.concat([cond, ad.take_rows(p["score_embed"], cats)], axis=1)
        h = ad.tanh(cond @ p["init_h_w"] + p["init_h_b"])
        c = cond @ p["init_c_w"] + p["init_c_b"]
        return h, c

    def _input(self, prev: np.ndarray | None, n: int) -> Tensor:
        if prev is None:
            return ad.add(ad.reshape(self.params["start"], (1, -1)), np.zeros((n, 1)))
        return ad.take_rows(self.params["embed"], prev)

    def _step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        p = self.params
        H = self.config.hidden_dim
        hc = ad.lstm_cell(x, h, c, p["lstm_wx"], p["lstm_wh"], p["lstm_b"])
        h, c = hc[:, :H], hc[:, H:]
        return h @ p["out_w"] + p["out_b"], h, c

    def draw_noise(self, n: int, rng: Rng) -> np.ndarray:
        return rng.normal((n, self.config.noise_dim))

    # -- scoring -------------------------------------------------------------

    def step_log_probs(self, ids: np.ndarray, z: np.ndarray, cats) -> Tensor:
        """Teacher-forced log-probability of each token, shape ``(n, T)``.

        Entries after a sequence's END emission are exactly 0.
        """
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        cats = self._check_scores(cats)
        n, T = ids.shape
        mask = np.arange(T)[None, :] < n_steps(ids)[:, None]
        h, c = self.initial_state(z, cats)
        cols = []
        prev = None
        for t in range(T):
            logits, h, c = self._step(self._input(prev, n), h, c)
            cols.append(ad.reshape(ad.pick(ad.log_softmax(logits), ids[:, t]), (n, 1)))
            prev = ids[:, t]
        return ad.concat(cols, axis=1) * mask

    def sequence_log_prob(self, ids: np.ndarray, z: np.ndarray, cats) -> np.ndarray:
        return self.step_log_probs(ids, z, cats).data.sum(axis=1)

    def nll(self, ids: np.ndarray, z: np.ndarray, cats) -> tuple[Tensor, int]:
        """Summed negative log-likelihood and the number of scored steps."""
        lp = self.step_log_probs(ids, z, cats)
        return -lp.sum(), int(n_steps(ids).sum())

    # -- sampling ------------------------------------------------------------

    def state_after(self, prefix: np.ndarray, z: np.ndarray, cats) -> tuple[Tensor, Tensor, np.ndarray]:
        """LSTM state after reading ``prefix`` and the log-probs of its tokens."""
        prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
        n, t = prefix.shape
        h, c = self.initial_state(z, self._check_scores(cats))
        logp = np.zeros((n, t))
        prev = None
        done = np.zeros(n, dtype=bool)
        for k in range(t):
            logits, h, c = self._step(self._input(prev, n), h, c)
            lp = ad.log_softmax(logits).data
            logp[:, k] = np.where(done, 0.0, lp[np.arange(n), prefix[:, k]])
            done |= prefix[:, k] == END_ID
            prev = prefix[:, k]
        return h, c, logp

    def continue_from(self, prefix: np.ndarray, h: Tensor, c: Tensor, rng: Rng,
                      greedy: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Sample the remaining ``T - t`` tokens after ``prefix`` from state (h, c)."""
        prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
        n, t = prefix.shape
        T = self.config.T
        ids = np.full((n, T), END_ID, dtype=np.int64)
        ids[:, :t] = prefix
        logp = np.zeros((n, T))
        done = (prefix == END_ID).any(axis=1)
        prev = prefix[:, -1] if t else None
        for k in range(t, T):
            logits, h, c = self._step(self._input(prev, n), h, c)
            probs = ad.softmax(logits.data)
            tok = np.argmax(probs, axis=1) if greedy else rng.categorical(probs)
            tok = np.where(done, END_ID, tok)
            logp[:, k] = np.where(done, 0.0, np.log(probs[np.arange(n), tok]))
            ids[:, k] = tok
            done |= tok == END_ID
            prev = tok
        return ids, logp

    def sample_ids(self, cats, rng: Rng, z: np.ndarray | None = None,
                   greedy: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Batched sampling: returns ids ``(n, T)``, step log-probs ``(n, T)`` and noise."""
        cats = self._check_scores(cats)
        if z is None:
            z = self.draw_noise(len(cats), rng)
        h, c = self.initial_state(z, cats)
        ids, logp = self.continue_from(np.zeros((len(cats), 0), np.int64), h, c, rng, greedy)
        return ids, logp, z


def _pack(ids: np.ndarray, logp: np.ndarray, cats: np.ndarray, z: np.ndarray) -> list[SampledSequence]:
    steps = n_steps(ids)
    lengths = true_lengths(ids)
    return [
        SampledSequence(TokenSeq(ids[i].copy(), int(lengths[i])), int(cats[i]), logp[i, : steps[i]].copy(), z[i].copy())
        for i in range(len(ids))
    ]


def sample(gen: Generator, score: int, n: int, rng: Rng, greedy: bool = False) -> list[SampledSequence]:
    """Draw ``n`` sequences conditioned on score category ``score``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= score < gen.config.C:
        raise ValueError(f"score category {score} outside [0, {gen.config.C})")
    cats = np.full(n, score, dtype=np.int64)
    ids, logp, z = gen.sample_ids(cats, rng, greedy=greedy)
    return _pack(ids, logp, cats, z)


def rollout_complete(gen: Generator, prefix: Sequence[int], score: int, N: int, rng: Rng,
                     noise: np.ndarray | None = None) -> np.ndarray:
    """``N`` completions of ``prefix`` to length T under the generator's own policy.

    ``noise`` is the conditioning noise of the sequence that produced the
    prefix; when omitted, fresh noise is drawn per completion, which makes an
    empty prefix equivalent to :func:`sample` under the same stream.
    """
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    t = len(prefix)
    if t >= gen.config.T:
        raise ad.UsageError(f"prefix length {t} must be < T={gen.config.T}")
    if N < 1:
        raise ValueError("N must be >= 1")
    cats = gen._check_scores(np.full(N, score))
    z = gen.draw_noise(N, rng) if noise is None else np.tile(np.asarray(noise, dtype=np.float64), (N, 1))
    prefixes = np.tile(prefix, (N, 1))
    h, c, _ = gen.state_after(prefixes, z, cats)
    ids, _ = gen.continue_from(prefixes, h, c, rng)
    return ids


def mle_pretrain(gen: Generator, data: Sequence[tuple[TokenSeq, int]], epochs: int, rng: Rng,
                 batch_size: int = 50, rate: float = 1e-2, optimizer: Adam | None = None) -> list[float]:
    """Maximum-likelihood training with teacher forcing; returns mean NLL per token per epoch."""
    if not data:
        raise ad.UsageError("mle_pretrain needs at least one sequence")
    ids = np.stack([np.asarray(s.ids if isinstance(s, TokenSeq) else s, dtype=np.int64) for s, _ in data])
    cats = gen._check_scores([c for _, c in data])
    opt = optimizer or Adam(gen.params, rate)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(ids))
        total, count = 0.0, 0
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            z = gen.draw_noise(len(idx), rng)
            with Tape() as tape:
                nll, steps = gen.nll(ids[idx], z, cats[idx])
                loss = nll / steps
            ad.backward(tape, loss)
            opt.step("descend")
            total += nll.item()
            count += steps
        history.append(total / count)
    return history


def surrogate(gen: Generator, batch: Sequence[tuple[SampledSequence, object]],
              baseline: bool = False) -> Tensor:
    """Policy-gradient surrogate: mean over the batch of sum_t reward_t * log G(token_t).

    A reward may be a scalar (applied to every step of its sequence) or a
    vector with one entry per sampling step.
    """
    if not batch:
        raise ad.UsageError("policy batch is empty")
    T = gen.config.T
    ids = np.stack([s.seq.ids for s, _ in batch])
    cats = np.array([s.score for s, _ in batch])
    z = np.stack([s.noise for s, _ in batch])
    steps = n_steps(ids)
    R = np.zeros((len(batch), T))
    for i, (s, r) in enumerate(batch):
        r = np.asarray(r, dtype=np.float64)
        if not np.isfinite(r).all():
            raise ad.NumericError("non-finite reward")
        R[i, : steps[i]] = r if r.ndim == 0 else r[: steps[i]]
    mask = np.arange(T)[None, :] < steps[:, None]
    if baseline:
        counts = np.maximum(mask.sum(axis=0), 1)
        R = np.where(mask, R - (R * mask).sum(axis=0) / counts, 0.0)
    lp = gen.step_log_probs(ids, z, cats)
    return ad.tsum(lp * R) / len(batch)


def policy_update(gen: Generator, batch: Sequence[tuple[SampledSequence, object]], rate: float = 1.0,
                  baseline: bool = False) -> Generator:
    """One gradient-ascent step on :func:`surrogate` with learning rate ``rate``."""
    with Tape() as tape:
        obj = surrogate(gen, batch, baseline)
    if obj not in tape:
        return gen
    ad.backward(tape, obj)
    ad.grad_step(gen.params, rate, "ascend")
    return gen
